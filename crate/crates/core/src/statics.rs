//! Comparative statics: analytic Jacobians of demand, appeal and equilibrium
//! cutoffs with respect to cutoffs, preferability weights and capacities.
//!
//! Every matrix is returned in original school order with rows indexed by the
//! responding school and columns by the school whose parameter moves.

use std::io::Write;

use nalgebra::DMatrix;

use crate::equilibrium::{solve, unclipped_cutoffs};
use crate::error::{Error, Result};
use crate::market::{
    build_a, check_cutoffs, compensated_sum, prefix_sums, sort_by_competitiveness, CompensatedSum,
    MarketParams, SortOrder,
};

/// Cutoffs closer than this are treated as tied.
pub const TIE_TOL: f64 = 1e-9;
/// Unclipped equilibrium cutoffs closer than this to zero are knife-edge.
pub const KNIFE_EDGE_TOL: f64 = 1e-9;

/// Jacobians of the decentralized (capacity-free) demand system at fixed cutoffs.
#[derive(Debug, Clone)]
pub struct UnconstrainedJacobians {
    /// `dD/dp`, equal to `A` permuted back to original order.
    pub cutoff_demand: DMatrix<f64>,
    /// `dL/dp = A diag(p)`.
    pub cutoff_appeal: DMatrix<f64>,
    /// `dD/dgamma`.
    pub weight_demand: DMatrix<f64>,
    /// `dL/dgamma`.
    pub weight_appeal: DMatrix<f64>,
    /// A pair of (original) schools whose cutoffs tie within [`TIE_TOL`].
    /// When set, the matrices are those of one adjacent linear piece; the
    /// true subdifferential is the convex hull over tie-breaks.
    pub tie: Option<(usize, usize)>,
}

/// Jacobians of the equilibrium map.
#[derive(Debug, Clone)]
pub struct EquilibriumJacobians {
    /// `d p_hat / d gamma`; lower triangular in competitiveness order.
    pub weight_cutoff: DMatrix<f64>,
    /// `d D(p_hat) / d gamma`.
    pub weight_demand: DMatrix<f64>,
    /// `d p_hat / d q`.
    pub capacity_cutoff: DMatrix<f64>,
    /// `d D(p_hat) / d q`, the block `[0 T; 0 I]` in competitiveness order.
    pub capacity_demand: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct JacobianSet {
    pub unconstrained: UnconstrainedJacobians,
    pub equilibrium: EquilibriumJacobians,
}

/// Both Jacobian families: decentralized ones at cutoffs `p`, equilibrium
/// ones at the market's own equilibrium.
pub fn jacobian_set(params: &MarketParams, p: &[f64]) -> Result<JacobianSet> {
    Ok(JacobianSet {
        unconstrained: unconstrained_jacobians(params, p)?,
        equilibrium: equilibrium_jacobians(params)?,
    })
}

pub fn unconstrained_jacobians(params: &MarketParams, p: &[f64]) -> Result<UnconstrainedJacobians> {
    unconstrained_jacobians_with_weights(params.gamma(), p)
}

pub fn unconstrained_jacobians_with_weights(
    gamma: &[f64],
    p: &[f64],
) -> Result<UnconstrainedJacobians> {
    let n = gamma.len();
    if p.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: p.len(),
        });
    }
    check_cutoffs(p)?;
    let order = SortOrder::ascending_by(p);
    let ps = order.to_sorted(p);
    let g = order.to_sorted(gamma);
    let s = prefix_sums(&g);

    let tie = ps
        .windows(2)
        .position(|w| w[1] - w[0] < TIE_TOL)
        .map(|k| (order.school(k), order.school(k + 1)));

    // Suffix sums of band widths (and squared-endpoint widths) over S and S^2.
    let mut v_d = vec![0.0; n];
    let mut u_d = vec![0.0; n];
    let mut v_l = vec![0.0; n];
    let mut u_l = vec![0.0; n];
    let mut acc_vd = CompensatedSum::default();
    let mut acc_ud = CompensatedSum::default();
    let mut acc_vl = CompensatedSum::default();
    let mut acc_ul = CompensatedSum::default();
    for k in (0..n).rev() {
        let upper = if k + 1 < n { ps[k + 1] } else { 1.0 };
        let w = upper - ps[k];
        let w2 = 0.5 * (upper * upper - ps[k] * ps[k]);
        acc_vd.add(w / s[k]);
        acc_ud.add(w / (s[k] * s[k]));
        acc_vl.add(w2 / s[k]);
        acc_ul.add(w2 / (s[k] * s[k]));
        v_d[k] = acc_vd.value();
        u_d[k] = acc_ud.value();
        v_l[k] = acc_vl.value();
        u_l[k] = acc_ul.value();
    }
    let weight_jacobian = |v: &[f64], u: &[f64]| {
        DMatrix::from_fn(n, n, |c, h| {
            if h < c {
                -g[c] * u[c]
            } else if h == c {
                v[c] - g[c] * u[c]
            } else {
                -g[c] * u[h]
            }
        })
    };
    let a = build_a(gamma, &order).a;
    let a_diag_p = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * ps[j]);
    Ok(UnconstrainedJacobians {
        cutoff_demand: order.matrix_to_original(&a),
        cutoff_appeal: order.matrix_to_original(&a_diag_p),
        weight_demand: order.matrix_to_original(&weight_jacobian(&v_d, &u_d)),
        weight_appeal: order.matrix_to_original(&weight_jacobian(&v_l, &u_l)),
        tie,
    })
}

/// Equilibrium Jacobians in closed form.
///
/// Fails with [`Error::KnifeEdge`] when some unclipped cutoff sits within
/// [`KNIFE_EDGE_TOL`] of zero, where the derivatives are undefined.
pub fn equilibrium_jacobians(params: &MarketParams) -> Result<EquilibriumJacobians> {
    let n = params.n_schools();
    let order = sort_by_competitiveness(params);
    let p_bar = unclipped_cutoffs(params, &order);
    if let Some(k) = p_bar.iter().position(|v| v.abs() < KNIFE_EDGE_TOL) {
        return Err(Error::KnifeEdge {
            school: order.school(k),
            value: p_bar[k],
            tol: KNIFE_EDGE_TOL,
        });
    }
    let g = order.to_sorted(params.gamma());
    let q = order.to_sorted(params.capacity());
    let s = prefix_sums(&g);
    let nz = p_bar.iter().filter(|&&v| v < 0.0).count();
    debug_assert!(p_bar[..nz].iter().all(|&v| v < 0.0));

    let weight_cutoff = DMatrix::from_fn(n, n, |c, h| {
        if c < nz || h > c {
            0.0
        } else if h < c {
            -q[c] / g[c]
        } else {
            let below = if c == 0 { 0.0 } else { s[c - 1] };
            q[c] * below / (g[c] * g[c])
        }
    });

    // Zero-cutoff schools share the leftover mass 1 - Q in proportion to
    // weight: D_c = gamma_c (1 - Q) / H, H the weight of that group.
    let head = compensated_sum(g[..nz].iter().copied());
    let leftover = 1.0 - compensated_sum(q[nz..].iter().copied());
    let weight_demand = DMatrix::from_fn(n, n, |c, h| {
        if c >= nz || h >= nz {
            0.0
        } else if h == c {
            (head - g[c]) * leftover / (head * head)
        } else {
            -g[c] * leftover / (head * head)
        }
    });

    let capacity_cutoff = DMatrix::from_fn(n, n, |c, h| {
        if c < nz || h < c {
            0.0
        } else if h == c {
            -s[c] / g[c]
        } else {
            -1.0
        }
    });

    let capacity_demand = DMatrix::from_fn(n, n, |c, h| {
        if c < nz {
            if h >= nz {
                -g[c] / head
            } else {
                0.0
            }
        } else if h == c {
            1.0
        } else {
            0.0
        }
    });

    Ok(EquilibriumJacobians {
        weight_cutoff: order.matrix_to_original(&weight_cutoff),
        weight_demand: order.matrix_to_original(&weight_demand),
        capacity_cutoff: order.matrix_to_original(&capacity_cutoff),
        capacity_demand: order.matrix_to_original(&capacity_demand),
    })
}

/// Central-difference Jacobian of `f` at `x`, with per-coordinate step
/// `rel_step * max(1, |x_j|)`.
pub fn central_difference<F>(mut f: F, x: &[f64], rel_step: f64) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = rel_step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    let m = cols.first().map_or(0, Vec::len);
    DMatrix::from_fn(m, n, |i, j| cols[j][i])
}

/// Distance from `x` to the nearest kink of the piecewise-linear demand:
/// another coordinate's value, or the ends of `[0, 1]`.
pub fn kink_distance(x: &[f64]) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut gap = sorted[0].min(1.0 - sorted[sorted.len() - 1]);
    for w in sorted.windows(2) {
        gap = gap.min(w[1] - w[0]);
    }
    gap
}

/// `dL(p_hat)/dgamma` by central differences of the equilibrium appeal.
/// There is no closed form for this matrix.
pub fn equilibrium_appeal_weight_jacobian_fd(
    params: &MarketParams,
    rel_step: f64,
) -> Result<DMatrix<f64>> {
    let mut failure = None;
    let jac = central_difference(
        |gamma| match params.with_gamma(gamma.to_vec()) {
            Ok(m) => solve(&m).demand.appeal,
            Err(e) => {
                failure.get_or_insert(e);
                vec![f64::NAN; gamma.len()]
            }
        },
        params.gamma(),
        rel_step,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(jac),
    }
}

/// Long-format CSV `row_school,col_school,value`.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, labels: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row_school", "col_school", "value"])?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_record([
                labels[i].as_str(),
                labels[j].as_str(),
                &m[(i, j)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_matrix(m: &DMatrix<f64>, expected: &[[f64; 4]; 4], scale: f64, tol: f64) {
        for i in 0..4 {
            for j in 0..4 {
                let e = expected[i][j] / scale;
                assert!(
                    (m[(i, j)] - e).abs() < tol,
                    "({i},{j}): {} vs {e}",
                    m[(i, j)]
                );
            }
        }
    }

    /// Pallet Town written with integer weights (2, 1, 3, 6); the same market
    /// as `MarketParams::pallet_town` up to the scale of gamma.
    fn pallet_integer() -> MarketParams {
        MarketParams::pallet_town().scaled(12.0).unwrap()
    }

    #[test]
    fn weight_demand_jacobian_pallet() {
        let j = unconstrained_jacobians(&pallet_integer(), &[0.2, 0.3, 0.4, 0.6]).unwrap();
        let expected = [
            [22.0, -14.0, -6.0, -2.0],
            [-7.0, 29.0, -3.0, -1.0],
            [-9.0, -9.0, 15.0, -3.0],
            [-6.0, -6.0, -6.0, 6.0],
        ];
        assert_matrix(&j.weight_demand, &expected, 360.0, 1e-14);
        assert!(j.tie.is_none());
    }

    #[test]
    fn weight_cutoff_jacobian_pallet() {
        let j = equilibrium_jacobians(&pallet_integer()).unwrap();
        let expected = [
            [0.0, 0.0, 0.0, 0.0],
            [-3.0, 6.0, 0.0, 0.0],
            [-2.0, -2.0, 2.0, 0.0],
            [-1.0, -1.0, -1.0, 1.0],
        ];
        assert_matrix(&j.weight_cutoff, &expected, 30.0, 1e-14);
        // every school fills: dD/dq is the identity, dD/dgamma vanishes
        assert_eq!(j.capacity_demand, DMatrix::identity(4, 4));
        assert!(j.weight_demand.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_jacobians_scale_inversely_with_gamma() {
        let a = unconstrained_jacobians(&pallet_integer(), &[0.2, 0.3, 0.4, 0.6]).unwrap();
        let b = unconstrained_jacobians(&MarketParams::pallet_town(), &[0.2, 0.3, 0.4, 0.6])
            .unwrap();
        assert!((&b.weight_demand / 12.0 - &a.weight_demand).abs().max() < 1e-14);
        assert!((&a.cutoff_demand - &b.cutoff_demand).abs().max() < 1e-15);
    }

    #[test]
    fn single_school() {
        let m = MarketParams::new(vec![1.0], vec![0.5]).unwrap();
        let j = unconstrained_jacobians(&m, &[0.3]).unwrap();
        assert_eq!(j.cutoff_demand[(0, 0)], -1.0);
        assert_eq!(j.cutoff_appeal[(0, 0)], -0.3);
        assert_eq!(j.weight_demand[(0, 0)], 0.0);
    }

    #[test]
    fn tie_is_flagged() {
        let m = MarketParams::pallet_town();
        let j = unconstrained_jacobians(&m, &[0.2, 0.4, 0.4, 0.6]).unwrap();
        assert_eq!(j.tie, Some((1, 2)));
    }

    #[test]
    fn knife_edge_is_an_error() {
        // single school with q = 1 has p_bar exactly 0
        let m = MarketParams::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            equilibrium_jacobians(&m),
            Err(Error::KnifeEdge { school: 0, .. })
        ));
    }

    #[test]
    fn cutoff_jacobian_is_a_and_asymmetric() {
        let m = MarketParams::pallet_town();
        let j = unconstrained_jacobians(&m, &[0.2, 0.3, 0.4, 0.6]).unwrap();
        let a = build_a(m.gamma(), &SortOrder::identity(4)).a;
        assert_eq!(j.cutoff_demand, a);
        let asym = (0..4)
            .flat_map(|i| (0..4).map(move |k| (i, k)))
            .any(|(i, k)| (a[(i, k)] - a[(k, i)]).abs() > 1e-9);
        assert!(asym);
        // diagonal is -gamma_i / S_i: starts at -1, stays in [-1, 0), and is
        // not monotone in general (here -1, -1/3, -1/2, -1/2)
        assert_eq!(a[(0, 0)], -1.0);
        assert!((1..4).all(|i| a[(i, i)] >= -1.0 && a[(i, i)] < 0.0));
        assert!(a[(1, 1)] > a[(2, 2)]);
    }

    #[test]
    fn matrix_csv() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &["a".into(), "b".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "row_school,col_school,value\na,a,1\na,b,2\nb,a,3\nb,b,4\n");
    }
}

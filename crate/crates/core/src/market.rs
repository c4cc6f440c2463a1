//! Market data model, canonical orderings and the triangular structure
//! matrices shared by the demand, equilibrium and statics modules.
//!
//! All closed forms in this crate are written in *sorted coordinates*: the
//! schools are re-indexed so that some key (cutoff, or competitiveness ratio
//! `gamma / q`) is nondecreasing. [`SortOrder`] carries that re-indexing and
//! converts vectors in both directions; public APIs take and return vectors
//! in the caller's original school order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exogenous description of a market: preferability weights and capacities.
///
/// `gamma[c] = exp(delta[c])` is the multinomial-logit weight of school `c`;
/// `capacity[c]` is its seat count as a fraction of the unit student mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    gamma: Vec<f64>,
    capacity: Vec<f64>,
}

impl MarketParams {
    pub fn new(gamma: Vec<f64>, capacity: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::InvalidMarket("market has no schools".into()));
        }
        if gamma.len() != capacity.len() {
            return Err(Error::Dimension {
                expected: gamma.len(),
                got: capacity.len(),
            });
        }
        if let Some(c) = gamma.iter().position(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::InvalidMarket(format!(
                "preferability weight of school {c} must be positive and finite, got {}",
                gamma[c]
            )));
        }
        if let Some(c) = capacity.iter().position(|q| !(q.is_finite() && *q > 0.0)) {
            return Err(Error::InvalidMarket(format!(
                "capacity of school {c} must be positive and finite, got {}",
                capacity[c]
            )));
        }
        let total: f64 = gamma.iter().sum();
        if !total.is_finite() {
            return Err(Error::InvalidMarket("total preferability weight overflows".into()));
        }
        Ok(Self { gamma, capacity })
    }

    /// Builds a market from preferability parameters `delta` (`gamma = exp delta`).
    pub fn from_delta(delta: &[f64], capacity: Vec<f64>) -> Result<Self> {
        Self::new(delta.iter().map(|d| d.exp()).collect(), capacity)
    }

    /// The four-school fixture used throughout the test suites:
    /// `gamma = (2, 1, 3, 6) / 12`, `q = (0.3, 0.1, 0.2, 0.2)`.
    pub fn pallet_town() -> Self {
        Self::new(
            vec![2.0 / 12.0, 1.0 / 12.0, 3.0 / 12.0, 6.0 / 12.0],
            vec![0.3, 0.1, 0.2, 0.2],
        )
        .expect("fixture is valid")
    }

    pub fn n_schools(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    pub fn delta(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| g.ln()).collect()
    }

    /// Total weight `Gamma = sum gamma`. Not normalized to one.
    pub fn total_weight(&self) -> f64 {
        compensated_sum(self.gamma.iter().copied())
    }

    pub fn total_capacity(&self) -> f64 {
        compensated_sum(self.capacity.iter().copied())
    }

    /// Competitiveness ratios `gamma[c] / q[c]`.
    pub fn competitiveness(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.capacity)
            .map(|(g, q)| g / q)
            .collect()
    }

    /// Same market with every weight multiplied by `k > 0`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.gamma.iter().map(|g| g * k).collect(), self.capacity.clone())
    }

    pub fn with_gamma(&self, gamma: Vec<f64>) -> Result<Self> {
        Self::new(gamma, self.capacity.clone())
    }

    pub fn with_capacity(&self, capacity: Vec<f64>) -> Result<Self> {
        Self::new(self.gamma.clone(), capacity)
    }
}

/// A permutation of school indices: `sorted[k]` is the original index of the
/// school in sorted position `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortOrder {
    sorted: Vec<usize>,
    rank: Vec<usize>,
}

impl SortOrder {
    /// Stable ascending sort by `key`; ties keep original index order.
    pub fn ascending_by(key: &[f64]) -> Self {
        let mut sorted: Vec<usize> = (0..key.len()).collect();
        sorted.sort_by(|&a, &b| key[a].total_cmp(&key[b]));
        Self::from_sorted(sorted).expect("a sorted index list is a permutation")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_sorted((0..n).collect()).expect("identity is a permutation")
    }

    /// Wraps an explicit permutation, rejecting anything that is not one.
    pub fn from_sorted(sorted: Vec<usize>) -> Result<Self> {
        let n = sorted.len();
        let mut rank = vec![usize::MAX; n];
        for (k, &c) in sorted.iter().enumerate() {
            if c >= n || rank[c] != usize::MAX {
                return Err(Error::Config(format!(
                    "{sorted:?} is not a permutation of 0..{n}"
                )));
            }
            rank[c] = k;
        }
        Ok(Self { sorted, rank })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Original index of the school at sorted position `k`.
    pub fn school(&self, k: usize) -> usize {
        self.sorted[k]
    }

    /// Sorted position of original school `c`.
    pub fn position(&self, c: usize) -> usize {
        self.rank[c]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sorted
    }

    pub fn is_identity(&self) -> bool {
        self.sorted.iter().enumerate().all(|(k, &c)| k == c)
    }

    /// Reorders a vector given in original coordinates into sorted coordinates.
    pub fn to_sorted<T: Copy>(&self, original: &[T]) -> Vec<T> {
        self.sorted.iter().map(|&c| original[c]).collect()
    }

    /// Reorders a vector given in sorted coordinates back into original coordinates.
    pub fn to_original<T: Copy>(&self, sorted: &[T]) -> Vec<T> {
        self.rank.iter().map(|&k| sorted[k]).collect()
    }

    /// Permutes a matrix in sorted coordinates (rows and columns) back to original order.
    pub fn matrix_to_original(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(self.rank[i], self.rank[j])])
    }

    /// Whether `key` read through this permutation is nondecreasing.
    pub fn sorts(&self, key: &[f64]) -> bool {
        self.sorted.windows(2).all(|w| key[w[0]] <= key[w[1]])
    }
}

/// Competitiveness order: ascending `gamma / q`, ties broken by index.
pub fn sort_by_competitiveness(params: &MarketParams) -> SortOrder {
    SortOrder::ascending_by(&params.competitiveness())
}

/// Cutoff vector in original school order together with a permutation that
/// sorts an associated key (the cutoffs themselves unless stated otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffVector {
    values: Vec<f64>,
    order: SortOrder,
}

impl CutoffVector {
    /// Validates `values` against `[0, 1]` and sorts by the values themselves.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_cutoffs(&values)?;
        let order = SortOrder::ascending_by(&values);
        Ok(Self { values, order })
    }

    /// Validates `values` and attaches an externally chosen order. The order
    /// must sort the values (it may differ from the default tie-break).
    pub fn with_order(values: Vec<f64>, order: SortOrder) -> Result<Self> {
        check_cutoffs(&values)?;
        if order.len() != values.len() {
            return Err(Error::Dimension {
                expected: values.len(),
                got: order.len(),
            });
        }
        if !order.sorts(&values) {
            return Err(Error::Config("order does not sort the cutoffs".into()));
        }
        Ok(Self { values, order })
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n]).expect("zeros are valid cutoffs")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn order(&self) -> &SortOrder {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sorted_values(&self) -> Vec<f64> {
        self.order.to_sorted(&self.values)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub(crate) fn check_cutoffs(p: &[f64]) -> Result<()> {
    match p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(school) => Err(Error::Domain {
            school,
            value: p[school],
        }),
        None => Ok(()),
    }
}

/// Dense triangular structure of the demand system in sorted coordinates.
#[derive(Debug, Clone)]
pub struct StructMatrices {
    pub order: SortOrder,
    /// `D = A p + gamma / Gamma` in sorted coordinates.
    pub a: DMatrix<f64>,
    /// Closed-form inverse of `a`.
    pub a_inv: DMatrix<f64>,
}

/// Builds `A` and its inverse for weights `gamma` (original order) sorted by `order`.
///
/// `A[i][i] = -gamma_i / S_i`, `A[i][j] = gamma_i (1/S_{j-1} - 1/S_j)` for
/// `i < j`, zero below the diagonal, with `S_k` the running weight total in
/// sorted order. The inverse has `-S_i / gamma_i` on the diagonal and `-1`
/// above it.
pub fn build_a(gamma: &[f64], order: &SortOrder) -> StructMatrices {
    let n = gamma.len();
    let g = order.to_sorted(gamma);
    let s = prefix_sums(&g);
    let a = DMatrix::from_fn(n, n, |i, j| {
        if i > j {
            0.0
        } else if i == j {
            -g[i] / s[i]
        } else {
            g[i] * g[j] / (s[j - 1] * s[j])
        }
    });
    let a_inv = DMatrix::from_fn(n, n, |i, j| {
        if i > j {
            0.0
        } else if i == j {
            -s[i] / g[i]
        } else {
            -1.0
        }
    });
    StructMatrices {
        order: order.clone(),
        a,
        a_inv,
    }
}

/// Block `T` of the equilibrium demand map in sorted coordinates.
///
/// `n_zero` is the number of leading sorted schools with zero cutoff (one
/// less than the 1-based index of the first positive cutoff). Every column
/// equals `-gamma_i / sum_{k < n_zero} gamma_k` for rows `i < n_zero`; the
/// block has `n_zero` rows and `n - n_zero` columns and is empty when
/// `n_zero == 0`.
pub fn build_t(gamma: &[f64], order: &SortOrder, n_zero: usize) -> DMatrix<f64> {
    let n = gamma.len();
    assert!(n_zero <= n, "n_zero {n_zero} exceeds school count {n}");
    let g = order.to_sorted(gamma);
    let head = compensated_sum(g[..n_zero].iter().copied());
    DMatrix::from_fn(n_zero, n - n_zero, |i, _| -g[i] / head)
}

/// Running totals with Neumaier compensation; `out[k] = sum(xs[..=k])`.
pub fn prefix_sums(xs: &[f64]) -> Vec<f64> {
    let mut acc = CompensatedSum::default();
    xs.iter()
        .map(|&x| {
            acc.add(x);
            acc.value()
        })
        .collect()
}

pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

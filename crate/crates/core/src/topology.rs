//! Mixing matrices and the communication schedule.
//!
//! A [`MixingMatrix`] is validated once at construction (symmetry, double
//! stochasticity, a simple unit eigenvalue) and is immutable afterwards, so it
//! can be shared read-only across parallel runs.
//!
//! EASGD is encoded as an `(m+1)×(m+1)` block matrix whose last row/column
//! couples the workers to the anchor variable:
//!
//! ```text
//! [ (1-β) I    β 1   ]
//! [  β 1ᵀ    1 - mβ  ]
//! ```
//!
//! Its eigenvalues are `1`, `1-β` (multiplicity `m-1`) and `1-(m+1)β`, which
//! is where the admissible range `0 < β < 2/(m+1)` comes from.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const UNIT_EIGEN_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingKind {
    Uniform,
    Gossip,
    Easgd,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MixingParams {
    pub beta: Option<f64>,
    pub neighbor_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    entries: Mat,
    kind: MixingKind,
    workers: usize,
    beta: Option<f64>,
    /// Eigenvalues sorted in descending order.
    spectrum: Vec<f64>,
    lambda0: f64,
}

impl MixingMatrix {
    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    pub fn kind(&self) -> MixingKind {
        self.kind
    }

    /// Number of worker nodes `m`. The matrix dimension is `m + 1` for EASGD.
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// Largest modulus among the non-unit eigenvalues.
    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn has_anchor(&self) -> bool {
        self.kind == MixingKind::Easgd
    }
}

pub fn build_mixing(kind: MixingKind, m: usize, params: MixingParams) -> Result<MixingMatrix> {
    if m == 0 {
        return Err(Error::BadParam("worker count m must be at least 1".into()));
    }
    let (entries, beta) = match kind {
        MixingKind::Uniform => {
            let w = 1.0 / m as f64;
            (Mat::from_fn(m, m, |_, _| w), None)
        }
        MixingKind::Identity => (Mat::identity(m), None),
        MixingKind::Gossip => {
            if m < 3 {
                return Err(Error::BadParam(format!(
                    "gossip ring needs m >= 3, got m = {m}"
                )));
            }
            let nw = params.neighbor_weight.ok_or_else(|| {
                Error::BadParam("gossip ring requires neighbor_weight".into())
            })?;
            let self_weight = 1.0 - 2.0 * nw;
            if !(nw > 0.0 && self_weight >= 0.0) {
                return Err(Error::BadParam(format!(
                    "neighbor_weight must lie in (0, 1/2], got {nw}"
                )));
            }
            let entries = Mat::from_fn(m, m, |i, j| {
                let fwd = (i + 1) % m == j;
                let back = (j + 1) % m == i;
                if i == j {
                    self_weight
                } else if fwd || back {
                    nw
                } else {
                    0.0
                }
            });
            (entries, None)
        }
        MixingKind::Easgd => {
            let beta = params
                .beta
                .ok_or_else(|| Error::BadParam("EASGD requires beta".into()))?;
            let upper = 2.0 / (m as f64 + 1.0);
            if !(beta > 0.0 && beta < upper) {
                return Err(Error::BadParam(format!(
                    "beta must satisfy 0 < beta < 2/(m+1) = {upper}, got {beta}"
                )));
            }
            let d = m + 1;
            let entries = Mat::from_fn(d, d, |i, j| match (i == m, j == m) {
                (false, false) if i == j => 1.0 - beta,
                (false, false) => 0.0,
                (true, true) => 1.0 - m as f64 * beta,
                _ => beta,
            });
            (entries, Some(beta))
        }
    };
    validate(entries, kind, m, beta)
}

fn validate(entries: Mat, kind: MixingKind, m: usize, beta: Option<f64>) -> Result<MixingMatrix> {
    let d = entries.rows();
    if entries.cols() != d {
        return Err(Error::SpectralViolation("matrix is not square".into()));
    }
    let asym = entries.max_abs_diff(&entries.transpose());
    if asym > SYMMETRY_TOL {
        return Err(Error::SpectralViolation(format!(
            "asymmetry {asym:e} exceeds {SYMMETRY_TOL:e}"
        )));
    }
    for i in 0..d {
        let row: f64 = entries.row(i).iter().sum();
        let col: f64 = (0..d).map(|r| entries[(r, i)]).sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::SpectralViolation(format!(
                "row/column {i} sums to {row}/{col}, not 1"
            )));
        }
    }
    if matches!(kind, MixingKind::Uniform | MixingKind::Gossip)
        && entries.as_slice().iter().any(|&v| v < 0.0)
    {
        return Err(Error::SpectralViolation("negative mixing weight".into()));
    }

    let spectrum = symmetric_eigenvalues(&entries);
    let unit = spectrum
        .iter()
        .filter(|l| (**l - 1.0).abs() <= UNIT_EIGEN_TOL)
        .count();
    if unit != 1 {
        return Err(Error::SpectralViolation(format!(
            "expected exactly one unit eigenvalue, found {unit}"
        )));
    }
    // spectrum[0] is the unit eigenvalue: every eigenvalue of a doubly
    // stochastic matrix is bounded by 1 in modulus up to rounding.
    let lambda0 = spectrum[1..].iter().map(|l| l.abs()).fold(0.0, f64::max);
    if lambda0 >= 1.0 - UNIT_EIGEN_TOL {
        return Err(Error::SpectralViolation(format!(
            "second eigenvalue modulus {lambda0} is not below 1"
        )));
    }
    Ok(MixingMatrix {
        entries,
        kind,
        workers: m,
        beta,
        spectrum,
        lambda0,
    })
}

/// Eigenvalues of a symmetric matrix, sorted in descending order.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    let d = a.rows();
    let dm = DMatrix::from_fn(d, d, |i, j| a[(i, j)]);
    let mut eig: Vec<f64> = SymmetricEigen::new(dm).eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Returns `λ₀`, re-checking the contraction condition.
pub fn spectral_gap(w: &MixingMatrix) -> Result<f64> {
    if w.lambda0 >= 1.0 - UNIT_EIGEN_TOL {
        return Err(Error::SpectralViolation(format!(
            "lambda0 = {} is not below 1",
            w.lambda0
        )));
    }
    Ok(w.lambda0)
}

/// Number of multiples of `k` in the closed interval `[t, n]`.
pub fn count_comm_rounds(t: u64, n: u64, k: u64) -> u64 {
    assert!(k >= 1, "communication period must be positive");
    assert!(1 <= t && t <= n, "need 1 <= t <= n");
    n / k - (t - 1) / k
}

/// Mixing matrix applied every `period_k` steps; identity otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct CommSchedule {
    period_k: u64,
    matrix: MixingMatrix,
}

impl CommSchedule {
    pub fn new(period_k: u64, matrix: MixingMatrix) -> Result<Self> {
        if period_k == 0 {
            return Err(Error::BadParam("communication period k must be >= 1".into()));
        }
        Ok(Self { period_k, matrix })
    }

    pub fn period(&self) -> u64 {
        self.period_k
    }

    pub fn matrix(&self) -> &MixingMatrix {
        &self.matrix
    }

    /// `Some(W)` when step `n` communicates, `None` for the identity.
    #[inline]
    pub fn at(&self, n: u64) -> Option<&MixingMatrix> {
        n.is_multiple_of(self.period_k).then_some(&self.matrix)
    }

    /// Dense product `W_{t,n} = ∏_{s=t}^{n} W_s`. All factors commute.
    pub fn product(&self, t: u64, n: u64) -> Mat {
        let d = self.matrix.dim();
        let mut acc = Mat::identity(d);
        for _ in 0..count_comm_rounds(t, n, self.period_k) {
            acc = acc.matmul(self.matrix.entries());
        }
        acc
    }
}

/// The averaging vector `u` and the deviation vectors `e_i` over `m` workers.
#[derive(Clone, Debug)]
pub struct ProjectionVectors {
    m: usize,
}

impl ProjectionVectors {
    pub fn new(m: usize) -> Self {
        assert!(m >= 1);
        Self { m }
    }

    pub fn u(&self) -> Vec<f64> {
        vec![1.0 / self.m as f64; self.m]
    }

    /// `e_i`: `1 - 1/m` at position `i`, `-1/m` elsewhere.
    pub fn e(&self, i: usize) -> Vec<f64> {
        assert!(i < self.m);
        let inv = 1.0 / self.m as f64;
        (0..self.m)
            .map(|j| if j == i { 1.0 - inv } else { -inv })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: MixingKind,
    pub m: usize,
    #[serde(default = "default_period")]
    pub k: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighbor_weight: Option<f64>,
}

fn default_period() -> u64 {
    1
}

impl TopologyConfig {
    pub fn build(&self) -> Result<CommSchedule> {
        let w = build_mixing(
            self.kind,
            self.m,
            MixingParams {
                beta: self.beta,
                neighbor_weight: self.neighbor_weight,
            },
        )?;
        CommSchedule::new(self.k, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_three_workers_is_one_third_everywhere() {
        let w = build_mixing(MixingKind::Uniform, 3, MixingParams::default()).unwrap();
        assert!(w.entries().as_slice().iter().all(|&v| v == 1.0 / 3.0));
        assert!(w.lambda0() <= 1e-12);
    }

    #[test]
    fn single_worker_has_zero_lambda0() {
        for kind in [MixingKind::Uniform, MixingKind::Identity] {
            let w = build_mixing(kind, 1, MixingParams::default()).unwrap();
            assert_eq!(w.entries().as_slice(), &[1.0]);
            assert_eq!(w.lambda0(), 0.0);
        }
    }

    #[test]
    fn identity_rejected_for_several_workers() {
        let err = build_mixing(MixingKind::Identity, 3, MixingParams::default()).unwrap_err();
        assert!(matches!(err, Error::SpectralViolation(_)));
    }

    #[test]
    fn easgd_spectrum_matches_block_structure() {
        let m = 4;
        let beta = 0.1;
        let w = build_mixing(
            MixingKind::Easgd,
            m,
            MixingParams {
                beta: Some(beta),
                ..Default::default()
            },
        )
        .unwrap();
        // 1, then 1-β with multiplicity m-1, then 1-(m+1)β.
        let expected = [1.0, 0.9, 0.9, 0.9, 0.5];
        for (got, want) in w.spectrum().iter().zip(expected) {
            assert!(close(*got, want, 1e-10), "{got} vs {want}");
        }
        assert!(close(spectral_gap(&w).unwrap(), 0.9, 1e-10));
    }

    #[test]
    fn easgd_beta_bounds() {
        for beta in [0.0, -0.1, 0.4, 0.6] {
            let err = build_mixing(
                MixingKind::Easgd,
                4,
                MixingParams {
                    beta: Some(beta),
                    ..Default::default()
                },
            )
            .unwrap_err();
            assert!(matches!(err, Error::BadParam(_)), "beta {beta}");
        }
        // β > 1/m gives a negative anchor self-weight but a valid spectrum.
        let w = build_mixing(
            MixingKind::Easgd,
            4,
            MixingParams {
                beta: Some(0.3),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(w.entries()[(4, 4)] < 0.0);
    }

    #[test]
    fn gossip_ring_lambda0_matches_circulant_formula() {
        let w = build_mixing(
            MixingKind::Gossip,
            4,
            MixingParams {
                neighbor_weight: Some(0.25),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(close(w.lambda0(), 0.5, 1e-12));

        for m in 3..12 {
            let nw = 0.3;
            let w = build_mixing(
                MixingKind::Gossip,
                m,
                MixingParams {
                    neighbor_weight: Some(nw),
                    ..Default::default()
                },
            )
            .unwrap();
            let mut analytic: Vec<f64> = (0..m)
                .map(|j| {
                    1.0 - 2.0 * nw
                        + 2.0 * nw * (2.0 * std::f64::consts::PI * j as f64 / m as f64).cos()
                })
                .collect();
            analytic.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in analytic.iter().zip(w.spectrum()) {
                assert!(close(*a, *b, 1e-12));
            }
        }
    }

    #[test]
    fn gossip_param_errors() {
        let p = MixingParams {
            neighbor_weight: Some(0.6),
            ..Default::default()
        };
        assert!(matches!(
            build_mixing(MixingKind::Gossip, 5, p),
            Err(Error::BadParam(_))
        ));
        assert!(matches!(
            build_mixing(MixingKind::Gossip, 2, MixingParams::default()),
            Err(Error::BadParam(_))
        ));
    }

    #[test]
    fn comm_round_examples() {
        assert_eq!(count_comm_rounds(1, 25, 10), 2);
        assert_eq!(count_comm_rounds(10, 10, 10), 1);
        assert_eq!(count_comm_rounds(7, 7, 10), 0);
        assert_eq!(count_comm_rounds(3, 9, 10), 0);
    }

    #[test]
    fn projection_vectors_against_ones() {
        let p = ProjectionVectors::new(5);
        assert!(close(p.u().iter().sum::<f64>(), 1.0, 1e-12));
        for i in 0..5 {
            assert!(p.e(i).iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn averaging_vector_is_left_invariant() {
        let w = build_mixing(
            MixingKind::Gossip,
            6,
            MixingParams {
                neighbor_weight: Some(0.2),
                ..Default::default()
            },
        )
        .unwrap();
        let u = ProjectionVectors::new(6).u();
        let uw = w.entries().left_mul(&u);
        for (a, b) in uw.iter().zip(&u) {
            assert!(close(*a, *b, 1e-12));
        }
        let ones = vec![1.0; 6];
        let w1 = w.entries().transpose().left_mul(&ones);
        assert!(w1.iter().all(|v| close(*v, 1.0, 1e-12)));
    }

    fn brute_rounds(t: u64, n: u64, k: u64) -> u64 {
        (t..=n).filter(|s| s % k == 0).count() as u64
    }

    proptest! {
        #[test]
        fn comm_rounds_match_enumeration(t in 1u64..10_000, span in 0u64..10_000, k in 1u64..=100) {
            let n = (t + span).min(10_000).max(t);
            let c = count_comm_rounds(t, n, k);
            prop_assert_eq!(c, brute_rounds(t, n, k));
            let base = (n - t) / k;
            prop_assert!(base <= c && c <= base + 1);
        }

        #[test]
        fn deviation_contracts_under_scheduled_products(
            m in 3usize..9,
            nw in 0.05f64..0.5,
            k in 1u64..5,
            t in 1u64..20,
            span in 0u64..20,
            i in 0usize..9,
        ) {
            let i = i % m;
            let n = t + span;
            let w = build_mixing(MixingKind::Gossip, m, MixingParams { neighbor_weight: Some(nw), ..Default::default() }).unwrap();
            let lambda0 = w.lambda0();
            let sched = CommSchedule::new(k, w).unwrap();
            let e = ProjectionVectors::new(m).e(i);
            let lhs = crate::linalg::norm(&sched.product(t, n).left_mul(&e));
            let rhs = crate::linalg::norm(&e) * lambda0.powi(count_comm_rounds(t, n, k) as i32);
            prop_assert!(lhs <= rhs + 1e-9, "{} > {}", lhs, rhs);
        }
    }
}

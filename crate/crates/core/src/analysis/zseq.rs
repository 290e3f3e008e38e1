use crate::engine::{z_point, TrajectoryRecord};

/// `z_n = (uᵀX_n - α uᵀX_{n-1}) / (1 - α)` at every snapshot step.
#[derive(Clone, Debug, PartialEq)]
pub struct ZSequence {
    pub n: Vec<u64>,
    pub z: Vec<Vec<f64>>,
    /// Largest `|z_{n+1} - z_n + ε_n uᵀG(X_n, ξ_n)/(1 - α)|` over consecutive
    /// snapshots; `None` without gradient snapshots.
    pub max_identity_residual: Option<f64>,
}

/// Builds the z-sequence from a record's snapshots (empty if the run did
/// not keep them). `uᵀX_0` is taken to be `uᵀX_1`.
pub fn z_sequence(record: &TrajectoryRecord, alpha: f64) -> ZSequence {
    let snaps = &record.snapshots;
    let mut n = Vec::with_capacity(snaps.len());
    let mut z = Vec::with_capacity(snaps.len());
    for (j, s) in snaps.iter().enumerate() {
        let prev = if j == 0 || snaps[j - 1].n + 1 != s.n {
            &s.avg_iterate
        } else {
            &snaps[j - 1].avg_iterate
        };
        n.push(s.n);
        z.push(z_point(&s.avg_iterate, prev, alpha));
    }
    let mut residual: Option<f64> = None;
    for j in 0..snaps.len().saturating_sub(1) {
        let s = &snaps[j];
        if s.avg_gradient.is_empty() || snaps[j + 1].n != s.n + 1 {
            continue;
        }
        let r = z[j + 1]
            .iter()
            .zip(&z[j])
            .zip(&s.avg_gradient)
            .map(|((a, b), g)| (a - b + s.eps * g / (1.0 - alpha)).abs())
            .fold(0.0, f64::max);
        residual = Some(residual.map_or(r, |m| m.max(r)));
    }
    ZSequence {
        n,
        z,
        max_identity_residual: residual,
    }
}

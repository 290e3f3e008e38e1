//! Per-worker losses `g_i`, their gradients, additive gradient noise, and
//! probe-based estimates of the smoothness and variance constants.
//!
//! Three families are shipped:
//!
//! * `QuadraticConsensus`: `g_i(x) = ½ (x - b_i)ᵀ A (x - b_i)` with a shared
//!   positive definite `A` and per-worker centres `b_i`. Convex, known `θ*`.
//! * `Logistic`: ridge-regularised logistic regression on a synthetic
//!   per-worker dataset. Strongly convex; `θ*` is found numerically.
//! * `SoftNonconvex`: `g_i(x) = Σ_j w_j tanh(a_jᵀx - c_ij)²`. Non-negative,
//!   globally Lipschitz gradient, bounded gradient, non-convex.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq, Mat};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    QuadraticConsensus,
    Logistic,
    SoftNonconvex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Rademacher,
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    #[serde(default)]
    pub scale: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        kind: NoiseKind::None,
        scale: 0.0,
    };

    pub fn gaussian(scale: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            scale,
        }
    }

    pub fn rademacher(scale: f64) -> Self {
        Self {
            kind: NoiseKind::Rademacher,
            scale,
        }
    }

    pub fn is_silent(&self) -> bool {
        self.kind == NoiseKind::None || self.scale == 0.0
    }

    /// Per-worker variance `E‖ξ‖²` for an `n`-dimensional draw.
    pub fn variance_per_worker(&self, n: usize) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::Gaussian | NoiseKind::Rademacher => n as f64 * self.scale * self.scale,
        }
    }

    /// Adds one draw to `out`, using the stream for `(seed, worker, step)`.
    pub fn perturb(&self, out: &mut [f64], key: NoiseKey, worker: usize) {
        if self.is_silent() {
            return;
        }
        let mut rng = stream(key.seed, Purpose::Noise, worker as u64, key.step);
        match self.kind {
            NoiseKind::Gaussian => {
                for o in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *o += self.scale * z;
                }
            }
            NoiseKind::Rademacher => {
                for o in out.iter_mut() {
                    *o += if rng.gen::<bool>() { self.scale } else { -self.scale };
                }
            }
            NoiseKind::None => {}
        }
    }
}

/// Identifies the substream for one stochastic gradient call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
struct Ridge {
    weight: f64,
    dir: Vec<f64>,
    offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum Losses {
    Quadratic {
        hessian: Mat,
        centers: Vec<Vec<f64>>,
    },
    Logistic {
        features: Vec<Mat>,
        labels: Vec<Vec<f64>>,
        l2: f64,
    },
    SoftNonconvex {
        ridges: Vec<Vec<Ridge>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    family: Family,
    dim: usize,
    workers: usize,
    losses: Losses,
    box_radius: f64,
    theta_star: Option<Vec<f64>>,
    g_star: Option<f64>,
    theta_star_grad_norm: Option<f64>,
}

pub const LOGISTIC_L2: f64 = 1e-2;
const LOGISTIC_SAMPLES: usize = 32;
const MINIMIZER_TOL: f64 = 1e-10;

impl ObjectiveSpec {
    /// Quadratic consensus problem with shared Hessian `hessian` and
    /// per-worker centres. `θ*` is the mean centre.
    pub fn quadratic(hessian: Mat, centers: Vec<Vec<f64>>, box_radius: f64) -> Result<Self> {
        let dim = hessian.rows();
        if hessian.cols() != dim || centers.is_empty() || centers.iter().any(|c| c.len() != dim) {
            return Err(Error::BadParam("quadratic dimensions disagree".into()));
        }
        let workers = centers.len();
        let mut spec = Self {
            family: Family::QuadraticConsensus,
            dim,
            workers,
            losses: Losses::Quadratic { hessian, centers },
            box_radius,
            theta_star: None,
            g_star: None,
            theta_star_grad_norm: None,
        };
        let Losses::Quadratic { centers, .. } = &spec.losses else {
            unreachable!()
        };
        let mut theta = vec![0.0; dim];
        for c in centers {
            for (t, v) in theta.iter_mut().zip(c) {
                *t += v / workers as f64;
            }
        }
        spec.set_minimizer(theta);
        Ok(spec)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn box_radius(&self) -> f64 {
        self.box_radius
    }

    pub fn theta_star(&self) -> Option<&[f64]> {
        self.theta_star.as_deref()
    }

    pub fn g_star(&self) -> Option<f64> {
        self.g_star
    }

    /// `‖∇g(θ*)‖` achieved when `θ*` was computed.
    pub fn theta_star_grad_norm(&self) -> Option<f64> {
        self.theta_star_grad_norm
    }

    pub fn is_convex(&self) -> bool {
        matches!(self.family, Family::QuadraticConsensus | Family::Logistic)
    }

    fn set_minimizer(&mut self, theta: Vec<f64>) {
        let grad = self.full_grad(&theta);
        self.theta_star_grad_norm = Some(norm_sq(&grad).sqrt());
        self.g_star = Some(self.eval_loss(&theta));
        self.theta_star = Some(theta);
    }

    /// Largest eigenvalue of the shared Hessian (quadratic family only).
    pub fn quadratic_smoothness(&self) -> Option<f64> {
        match &self.losses {
            Losses::Quadratic { hessian, .. } => {
                Some(crate::topology::symmetric_eigenvalues(hessian)[0])
            }
            _ => None,
        }
    }

    pub fn worker_loss(&self, i: usize, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.losses {
            Losses::Quadratic { hessian, centers } => {
                let d: Vec<f64> = x.iter().zip(&centers[i]).map(|(a, b)| a - b).collect();
                let mut q = 0.0;
                for r in 0..self.dim {
                    q += d[r] * dot(hessian.row(r), &d);
                }
                0.5 * q
            }
            Losses::Logistic {
                features,
                labels,
                l2,
            } => {
                let f = &features[i];
                let mut acc = 0.0;
                for (s, &y) in labels[i].iter().enumerate() {
                    acc += softplus(-y * dot(f.row(s), x));
                }
                acc / labels[i].len() as f64 + 0.5 * l2 * norm_sq(x)
            }
            Losses::SoftNonconvex { ridges } => ridges[i]
                .iter()
                .map(|r| {
                    let t = (dot(&r.dir, x) - r.offset).tanh();
                    r.weight * t * t
                })
                .sum(),
        }
    }

    /// Writes `∇g_i(x)` into `out`.
    pub fn worker_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        out.iter_mut().for_each(|o| *o = 0.0);
        match &self.losses {
            Losses::Quadratic { hessian, centers } => {
                let c = &centers[i];
                for (r, o) in out.iter_mut().enumerate() {
                    let row = hessian.row(r);
                    let mut acc = 0.0;
                    for j in 0..self.dim {
                        acc += row[j] * (x[j] - c[j]);
                    }
                    *o = acc;
                }
            }
            Losses::Logistic {
                features,
                labels,
                l2,
            } => {
                let f = &features[i];
                let inv = 1.0 / labels[i].len() as f64;
                for (s, &y) in labels[i].iter().enumerate() {
                    let a = f.row(s);
                    // d/dz softplus(-y z) = -y σ(-y z)
                    let coef = -y * sigmoid(-y * dot(a, x)) * inv;
                    for (o, aj) in out.iter_mut().zip(a) {
                        *o += coef * aj;
                    }
                }
                for (o, xj) in out.iter_mut().zip(x) {
                    *o += l2 * xj;
                }
            }
            Losses::SoftNonconvex { ridges } => {
                for r in &ridges[i] {
                    let t = (dot(&r.dir, x) - r.offset).tanh();
                    let coef = 2.0 * r.weight * t * (1.0 - t * t);
                    for (o, aj) in out.iter_mut().zip(&r.dir) {
                        *o += coef * aj;
                    }
                }
            }
        }
    }

    pub fn worker_grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.worker_grad_into(i, x, &mut out);
        out
    }

    /// `g(x) = (1/m) Σ g_i(x)`.
    pub fn eval_loss(&self, x: &[f64]) -> f64 {
        (0..self.workers).map(|i| self.worker_loss(i, x)).sum::<f64>() / self.workers as f64
    }

    /// `∇g(x) = (1/m) Σ ∇g_i(x)`.
    pub fn full_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut buf = vec![0.0; self.dim];
        for i in 0..self.workers {
            self.worker_grad_into(i, x, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        let inv = 1.0 / self.workers as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }

    /// `G(X)`: row `i` is `∇g_i` evaluated at row `i` of `x`. Extra rows
    /// beyond the worker count (the EASGD anchor) receive a zero gradient.
    pub fn grad_exact(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows(), self.dim);
        self.grad_exact_into(x, &mut out);
        out
    }

    pub fn grad_exact_into(&self, x: &Mat, out: &mut Mat) {
        assert!(x.rows() >= self.workers && x.cols() == self.dim);
        for i in 0..self.workers {
            let (row_x, row_out) = (x.row(i), &mut out.row_mut(i)[..]);
            self.worker_grad_into(i, row_x, row_out);
        }
        for i in self.workers..x.rows() {
            out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `G(X, ξ)`: exact gradients plus one independent noise draw per worker.
    pub fn grad_noisy(&self, noise: &NoiseModel, x: &Mat, key: NoiseKey) -> Mat {
        let mut out = Mat::zeros(x.rows(), self.dim);
        self.grad_noisy_into(noise, x, key, &mut out);
        out
    }

    pub fn grad_noisy_into(&self, noise: &NoiseModel, x: &Mat, key: NoiseKey, out: &mut Mat) {
        self.grad_exact_into(x, out);
        for i in 0..self.workers {
            noise.perturb(out.row_mut(i), key, i);
        }
    }

    /// Uniform point in the configured box.
    pub fn sample_box(&self, rng: &mut impl Rng, radius: f64) -> Vec<f64> {
        (0..self.dim).map(|_| rng.gen_range(-radius..=radius)).collect()
    }

    /// Probe-based estimates of the assumption constants. Probes are drawn
    /// from the configured box using the `Probe` stream of `seed`.
    pub fn estimate_assumptions(
        &self,
        noise: &NoiseModel,
        probe_count: usize,
        seed: u64,
    ) -> Result<AssumptionReport> {
        if probe_count < 100 {
            return Err(Error::BadParam(format!(
                "probe_count must be >= 100, got {probe_count}"
            )));
        }
        let m = self.workers;
        let r = self.box_radius;
        let mut rng = stream(seed, Purpose::Probe, 0, 0);
        let mut sigma0_acc = 0.0;
        let mut sigma1: f64 = 0.0;
        let mut lip: f64 = 0.0;
        let mut bound: f64 = 0.0;
        let mut buf = vec![0.0; self.dim];
        for p in 0..probe_count {
            let x = Mat::from_rows(&(0..m).map(|_| self.sample_box(&mut rng, r)).collect::<Vec<_>>());
            let y = Mat::from_rows(&(0..m).map(|_| self.sample_box(&mut rng, r)).collect::<Vec<_>>());
            let gx = self.grad_exact(&x);
            let gy = self.grad_exact(&y);

            let noisy = self.grad_noisy(
                noise,
                &x,
                NoiseKey {
                    seed,
                    step: p as u64,
                },
            );
            sigma0_acc += noisy
                .as_slice()
                .iter()
                .zip(gx.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();

            let common = x.row(0).to_vec();
            let full = self.full_grad(&common);
            let mut het = 0.0;
            for i in 0..m {
                self.worker_grad_into(i, &common, &mut buf);
                het += buf.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            sigma1 = sigma1.max(het / m as f64);

            let dx = x
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let dg = gx
                .as_slice()
                .iter()
                .zip(gy.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dx > 0.0 {
                lip = lip.max(dg / dx);
            }
            bound = bound.max(gx.frobenius_norm());
        }
        Ok(AssumptionReport {
            sigma0_sq_hat: if noise.is_silent() {
                0.0
            } else {
                sigma0_acc / probe_count as f64
            },
            sigma1_sq_hat: sigma1,
            lipschitz_hat: lip,
            grad_bound_hat: bound,
            probes: probe_count,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Estimate of `Σ_i E‖∇g_i(x,ξ) - ∇g_i(x)‖²` (a sum over workers).
    pub sigma0_sq_hat: f64,
    /// Max over probes of `(1/m) Σ_i ‖∇g_i(x) - ∇g(x)‖²` (an average).
    pub sigma1_sq_hat: f64,
    pub lipschitz_hat: f64,
    pub grad_bound_hat: f64,
    pub probes: usize,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub family: Family,
    #[serde(rename = "N")]
    pub dim: usize,
    pub m: usize,
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_box_radius")]
    pub box_radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_seed: Option<u64>,
    /// Smallest Hessian eigenvalue of `QuadraticConsensus` (largest is 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_curvature: Option<f64>,
}

pub const DEFAULT_MIN_CURVATURE: f64 = 0.1;

fn default_box_radius() -> f64 {
    1.0
}

impl ObjectiveConfig {
    pub fn build(&self) -> Result<ObjectiveSpec> {
        if self.dim == 0 || self.m == 0 {
            return Err(Error::BadConfig("objective needs N >= 1 and m >= 1".into()));
        }
        if !(self.heterogeneity >= 0.0 && self.box_radius > 0.0 && self.noise.scale >= 0.0) {
            return Err(Error::BadConfig(
                "heterogeneity, box_radius and noise.scale must be non-negative".into(),
            ));
        }
        if let Some(c) = self.min_curvature {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::BadConfig(format!(
                    "min_curvature must lie in (0, 1], got {c}"
                )));
            }
        }
        let seed = self.dataset_seed.unwrap_or(0);
        match self.family {
            Family::QuadraticConsensus => build_quadratic(self, seed),
            Family::Logistic => build_logistic(self, seed),
            Family::SoftNonconvex => Ok(build_soft_nonconvex(self, seed)),
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

/// Shared Hessian `Q diag(λ) Qᵀ` with `λ` log-spaced on `[0.1, 1]`.
fn build_quadratic(cfg: &ObjectiveConfig, seed: u64) -> Result<ObjectiveSpec> {
    let n = cfg.dim;
    let mut rng = stream(seed, Purpose::Dataset, 0, 0);
    let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let lo = cfg.min_curvature.unwrap_or(DEFAULT_MIN_CURVATURE).log10();
    // Log-spaced from `min_curvature` up to 1.
    let eig: Vec<f64> = (0..n)
        .map(|j| {
            if n == 1 {
                1.0
            } else {
                10f64.powf(lo * (1.0 - j as f64 / (n - 1) as f64))
            }
        })
        .collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(eig));
    let h: DMatrix<f64> = &q * d * q.transpose();
    let hessian = Mat::from_fn(n, n, |i, j| 0.5 * (h[(i, j)] + h[(j, i)]));
    let base = gaussian_vec(&mut rng, n)
        .into_iter()
        .map(|v| 0.5 * v)
        .collect::<Vec<_>>();
    let centers = (0..cfg.m)
        .map(|i| {
            let mut r = stream(seed, Purpose::Dataset, 1 + i as u64, 0);
            base.iter()
                .map(|b| b + cfg.heterogeneity * gaussian(&mut r))
                .collect()
        })
        .collect();
    ObjectiveSpec::quadratic(hessian, centers, cfg.box_radius)
}

fn build_logistic(cfg: &ObjectiveConfig, seed: u64) -> Result<ObjectiveSpec> {
    let n = cfg.dim;
    let mut rng = stream(seed, Purpose::Dataset, 0, 0);
    let teacher = gaussian_vec(&mut rng, n);
    let mut base_rng = stream(seed, Purpose::Dataset, 0, 1);
    let base: Vec<(Vec<f64>, f64)> = (0..LOGISTIC_SAMPLES)
        .map(|_| (gaussian_vec(&mut base_rng, n), gaussian(&mut base_rng)))
        .collect();
    let h = cfg.heterogeneity;
    let mut features = Vec::with_capacity(cfg.m);
    let mut labels = Vec::with_capacity(cfg.m);
    for i in 0..cfg.m {
        let mut r = stream(seed, Purpose::Dataset, 1 + i as u64, 0);
        let shift = gaussian_vec(&mut r, n);
        let mut rows = Vec::with_capacity(LOGISTIC_SAMPLES);
        let mut ys = Vec::with_capacity(LOGISTIC_SAMPLES);
        for (a0, z) in &base {
            let jitter = gaussian_vec(&mut r, n);
            let a: Vec<f64> = a0
                .iter()
                .zip(shift.iter().zip(&jitter))
                .map(|(v, (s, j))| v + h * (s + j))
                .collect();
            ys.push(if dot(&a, &teacher) + 0.5 * z >= 0.0 { 1.0 } else { -1.0 });
            rows.push(a);
        }
        features.push(Mat::from_rows(&rows));
        labels.push(ys);
    }
    let smooth = 0.25
        * features
            .iter()
            .map(|f| f.as_slice().iter().map(|v| v * v).sum::<f64>() / LOGISTIC_SAMPLES as f64)
            .fold(0.0, f64::max)
        + LOGISTIC_L2;
    let mut spec = ObjectiveSpec {
        family: Family::Logistic,
        dim: n,
        workers: cfg.m,
        losses: Losses::Logistic {
            features,
            labels,
            l2: LOGISTIC_L2,
        },
        box_radius: cfg.box_radius,
        theta_star: None,
        g_star: None,
        theta_star_grad_norm: None,
    };
    let theta = minimize_by_gradient_descent(&spec, 1.0 / smooth, MINIMIZER_TOL, 5_000_000);
    spec.set_minimizer(theta);
    Ok(spec)
}

/// Fixed-step deterministic gradient descent from the origin until
/// `‖∇g‖ ≤ tol` or the iteration cap.
fn minimize_by_gradient_descent(
    spec: &ObjectiveSpec,
    step: f64,
    tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; spec.dim];
    for _ in 0..max_iter {
        let g = spec.full_grad(&x);
        if norm_sq(&g).sqrt() <= tol {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= step * gi;
        }
    }
    x
}

fn build_soft_nonconvex(cfg: &ObjectiveConfig, seed: u64) -> ObjectiveSpec {
    let n = cfg.dim;
    let count = 4 * n;
    let mut rng = stream(seed, Purpose::Dataset, 0, 0);
    let scale = 2.0 / (n as f64).sqrt();
    let shared: Vec<(f64, Vec<f64>, f64)> = (0..count)
        .map(|_| {
            let w = rng.gen_range(0.5..1.5) / count as f64;
            let dir: Vec<f64> = gaussian_vec(&mut rng, n).into_iter().map(|v| scale * v).collect();
            let c = rng.gen_range(-1.0..1.0);
            (w, dir, c)
        })
        .collect();
    let ridges = (0..cfg.m)
        .map(|i| {
            let mut r = stream(seed, Purpose::Dataset, 1 + i as u64, 0);
            shared
                .iter()
                .map(|(w, dir, c)| Ridge {
                    weight: *w,
                    dir: dir.clone(),
                    offset: c + cfg.heterogeneity * gaussian(&mut r),
                })
                .collect()
        })
        .collect();
    ObjectiveSpec {
        family: Family::SoftNonconvex,
        dim: n,
        workers: cfg.m,
        losses: Losses::SoftNonconvex { ridges },
        box_radius: cfg.box_radius,
        theta_star: None,
        g_star: None,
        theta_star_grad_norm: None,
    }
}

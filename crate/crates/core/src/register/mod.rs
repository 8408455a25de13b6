//! Rigid point-set registration.
//!
//! Coarse alignment treats the moving cloud as the centroids of an isotropic
//! Gaussian mixture with a uniform outlier component and fits it to the fixed
//! cloud by expectation-maximization. The E-step evaluates every posterior
//! exactly (terms more than `e^-40` below a point's largest term are below
//! double precision and skipped). The M-step is a weighted Procrustes solve
//! followed by the closed-form variance update.
//!
//! Fine alignment is point-to-point ICP. Each moving point is paired with its
//! nearest fixed point, and pairs farther apart than `max_corr_dist` are dropped.
//! The tracked objective is the capped mean squared error
//! `mean(min(d², max_corr_dist²))` over all moving points. It cannot increase
//! under Procrustes + re-matching, so any step that raises it is rejected and
//! ends the run.

use std::borrow::Cow;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{nearest_rotation, Point3, RigidTransform};
use crate::kdtree::KdTree;

mod kernels;

use kernels::{Isa, Lanes};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("degenerate {which} cloud: {reason}")]
    DegenerateInput { which: &'static str, reason: String },
    #[error("numerical failure in EM: {0}")]
    NumericalFailure(String),
    #[error("no correspondences within {max_corr_dist} mm at initialization")]
    NoCorrespondences { max_corr_dist: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmEmConfig {
    pub max_iterations: usize,
    /// Initial variance in mm²; 0 derives it from the fixed cloud's extent.
    pub sigma2_init: f64,
    /// Weight of the uniform outlier component, in `[0, 1)`.
    pub outlier_weight: f64,
    /// Relative change of the log-likelihood that counts as converged.
    pub tol: f64,
    /// EM runs on a seeded random subset of at most this many moving points;
    /// 0 uses all of them.
    pub max_moving_points: usize,
    /// Same for the fixed cloud.
    pub max_fixed_points: usize,
}

impl Default for GmmEmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            sigma2_init: 0.0,
            outlier_weight: 0.2,
            tol: 1e-6,
            max_moving_points: 800,
            max_fixed_points: 2500,
        }
    }
}

impl GmmEmConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if !(0.0..1.0).contains(&self.outlier_weight) {
            return Err(RegistrationError::InvalidConfig(format!(
                "outlier weight {} outside [0, 1)",
                self.outlier_weight
            )));
        }
        if !(self.tol > 0.0) {
            return Err(RegistrationError::InvalidConfig(
                "EM tol must be > 0".into(),
            ));
        }
        if !(self.sigma2_init >= 0.0) {
            return Err(RegistrationError::InvalidConfig(
                "sigma2_init must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub iterations: usize,
    pub max_corr_dist: f64,
    /// Relative decrease of the objective that counts as converged.
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            iterations: 250,
            max_corr_dist: 100.0,
            // Against a noisy scan the MSE keeps creeping down along a biased
            // valley; late iterations cost accuracy, so stop below 0.1%.
            tol: 1e-3,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.iterations == 0 {
            return Err(RegistrationError::InvalidConfig(
                "ICP needs at least one iteration".into(),
            ));
        }
        if !(self.max_corr_dist > 0.0) {
            return Err(RegistrationError::InvalidConfig(
                "max_corr_dist must be > 0".into(),
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(RegistrationError::InvalidConfig(
                "ICP tol must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Maps moving → fixed.
    pub transform: RigidTransform,
    /// mm². For EM: posterior-weighted mean squared residual. For ICP: the
    /// capped objective described in the module docs.
    pub final_mse: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// EM log-likelihood after each E-step.
    pub em_objective: Vec<f64>,
    /// ICP objective at the start and after each accepted iteration.
    pub icp_mse: Vec<f64>,
}

/// Rotation maximizing `tr(Aᵀ R)` for a cross-covariance `A = Σ w x yᵀ`.
fn rotation_from_cross_covariance(a: &Matrix3<f64>) -> Matrix3<f64> {
    nearest_rotation(a)
}

fn covariance(points: &[Point3]) -> (Point3, Matrix3<f64>) {
    let n = points.len() as f64;
    let mean = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords)
        / n;
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p.coords - mean;
        acc + d * d.transpose()
    }) / n;
    (Point3::from(mean), cov)
}

fn check_nondegenerate(points: &[Point3], which: &'static str) -> Result<(), RegistrationError> {
    if points.len() < 3 {
        return Err(RegistrationError::DegenerateInput {
            which,
            reason: format!("{} points, need at least 3", points.len()),
        });
    }
    let (_, cov) = covariance(points);
    let mut ev = SymmetricEigen::new(cov).eigenvalues;
    ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(RegistrationError::DegenerateInput {
            which,
            reason: "points are coincident or collinear".into(),
        });
    }
    Ok(())
}

/// Extents of the cloud along its principal axes. Unlike an axis-aligned box
/// this does not change when the cloud is rotated.
pub fn principal_extent(points: &[Point3]) -> Vector3<f64> {
    if points.is_empty() {
        return Vector3::zeros();
    }
    let (mean, cov) = covariance(points);
    let axes = SymmetricEigen::new(cov).eigenvectors;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        let q = axes.transpose() * (p - mean);
        lo = lo.inf(&q);
        hi = hi.sup(&q);
    }
    let mut ext = hi - lo;
    ext.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    ext
}

/// Default initial variance: (principal bounding-box diagonal / 4)².
pub fn default_sigma2(fixed: &[Point3]) -> f64 {
    (principal_extent(fixed).norm() / 4.0).powi(2)
}

/// Volume used for the uniform outlier density; thin extents are clamped to
/// 1% of the diagonal so flat clouds keep a finite density.
fn outlier_volume(fixed: &[Point3]) -> f64 {
    let ext = principal_extent(fixed);
    let floor = (ext.norm() * 0.01).max(1e-6);
    ext.iter().map(|e| e.max(floor)).product()
}

/// Posterior terms below `e^-LOG_CUTOFF` of a point's largest term are dropped.
const LOG_CUTOFF: f64 = 40.0;
/// Variance below which the fit is treated as exact (mm²).
const SIGMA2_FLOOR: f64 = 1e-8;
/// Fixed points per work unit, taken consecutively in kd-tree order so each
/// unit covers a compact region.
const FIXED_CHUNK: usize = 64;

struct EStep {
    log_likelihood: f64,
    /// Σ_mn P_mn
    np: f64,
    /// Σ_n P_mn per moving point.
    p1: Vec<f64>,
    /// Σ_n (Σ_m P_mn) x_n
    sum_px: Vector3<f64>,
    sum_px2: f64,
    /// Σ_mn P_mn x_n y_mᵀ
    cross: Matrix3<f64>,
    /// Σ_mn P_mn |x_n - T y_m|²
    weighted_sq: f64,
}

impl EStep {
    fn zeros(m: usize) -> Self {
        EStep {
            log_likelihood: 0.0,
            np: 0.0,
            p1: vec![0.0; m],
            sum_px: Vector3::zeros(),
            sum_px2: 0.0,
            cross: Matrix3::zeros(),
            weighted_sq: 0.0,
        }
    }
}

/// Fixed cloud in spatially sorted chunks.
struct FixedChunks {
    points: Vec<Vector3<f64>>,
    /// (start, end, bbox min, bbox max)
    chunks: Vec<(usize, usize, Vector3<f64>, Vector3<f64>)>,
}

impl FixedChunks {
    fn new(xs: &[Vector3<f64>]) -> Self {
        let as_points: Vec<Point3> = xs.iter().map(|v| Point3::from(*v)).collect();
        let tree = KdTree::build(&as_points);
        let points: Vec<Vector3<f64>> = tree.order().iter().map(|&i| xs[i]).collect();
        let chunks = (0..points.len())
            .step_by(FIXED_CHUNK)
            .map(|start| {
                let end = (start + FIXED_CHUNK).min(points.len());
                let (lo, hi) = bbox(&points[start..end]);
                (start, end, lo, hi)
            })
            .collect();
        FixedChunks { points, chunks }
    }
}

fn bbox(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    points.iter().fold(
        (
            Vector3::repeat(f64::INFINITY),
            Vector3::repeat(f64::NEG_INFINITY),
        ),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

fn e_step(
    fixed: &FixedChunks,
    moving: &[Vector3<f64>],
    transformed: &[Vector3<f64>],
    sigma2: f64,
    w: f64,
    volume: f64,
) -> EStep {
    use rayon::prelude::*;

    let m = moving.len();
    let k = 2.0 * sigma2;
    let ln_2pi_s2 = (2.0 * std::f64::consts::PI * sigma2).ln();
    // ln c, with c = (2πσ²)^1.5 · w/(1-w) · M/V the outlier term in the posterior denominator.
    let ln_c = if w > 0.0 {
        1.5 * ln_2pi_s2 + (w / (1.0 - w)).ln() + (m as f64).ln() - volume.ln()
    } else {
        f64::NEG_INFINITY
    };
    let ln_norm = ((1.0 - w) / m as f64).ln() - 1.5 * ln_2pi_s2;
    // Terms below 1e-16·c/M cannot change a denominator Σ + c in double
    // precision, so centroids beyond this radius are skipped.
    let radius = if w > 0.0 {
        (k * (neg_ln_scale(m) - ln_c).max(0.0)).sqrt()
    } else {
        f64::INFINITY
    };
    let (tx, (ty, tz)): (Vec<f64>, (Vec<f64>, Vec<f64>)) =
        transformed.iter().map(|v| (v.x, (v.y, v.z))).unzip();

    let ctx = ChunkCtx {
        fixed,
        moving,
        transformed,
        tx: &tx,
        ty: &ty,
        tz: &tz,
        k,
        ln_c,
        ln_norm,
        radius,
        isa: Isa::detect(),
    };
    let parts: Vec<EStep> = fixed
        .chunks
        .par_iter()
        .map(|chunk| ctx.run(chunk))
        .collect();

    // Summed in chunk order, independent of the thread count.
    let mut out = EStep::zeros(m);
    for c in parts {
        out.log_likelihood += c.log_likelihood;
        out.np += c.np;
        for (o, v) in out.p1.iter_mut().zip(&c.p1) {
            *o += v;
        }
        out.sum_px += c.sum_px;
        out.sum_px2 += c.sum_px2;
        out.cross += c.cross;
        out.weighted_sq += c.weighted_sq;
    }
    out
}

struct ChunkCtx<'a> {
    fixed: &'a FixedChunks,
    moving: &'a [Vector3<f64>],
    transformed: &'a [Vector3<f64>],
    tx: &'a [f64],
    ty: &'a [f64],
    tz: &'a [f64],
    k: f64,
    ln_c: f64,
    ln_norm: f64,
    radius: f64,
    isa: Isa,
}

type Chunk = (usize, usize, Vector3<f64>, Vector3<f64>);

impl ChunkCtx<'_> {
    fn run(&self, &(start, end, lo, hi): &Chunk) -> EStep {
        let (tx, ty, tz) = (self.tx, self.ty, self.tz);
        let (k, ln_c, ln_norm, isa) = (self.k, self.ln_c, self.ln_norm, self.isa);
        let inv_k = 1.0 / k;
        let (moving, transformed, fixed) = (self.moving, self.transformed, self.fixed);
        let m = moving.len();
        let mut acc = EStep::zeros(m);
        let lo = lo - Vector3::repeat(self.radius);
        let hi = hi + Vector3::repeat(self.radius);
        let cand: Vec<usize> = (0..m)
            .filter(|&j| {
                tx[j] >= lo.x
                    && tx[j] <= hi.x
                    && ty[j] >= lo.y
                    && ty[j] <= hi.y
                    && tz[j] >= lo.z
                    && tz[j] <= hi.z
            })
            .collect();
        let c = Lanes::gather(&cand, transformed, moving);
        let n = c.len();
        let mut a = vec![0.0; n];
        let mut e = vec![0.0; n];
        let mut p1 = vec![0.0; n];
        for x in &fixed.points[start..end] {
            let amax = isa.neg_scaled_sq_dist(&c, x, inv_k, &mut a);
            // Skipped terms are at most e^-LOG_CUTOFF of the largest one or
            // below 1e-16·c/M.
            let floor = (amax - LOG_CUTOFF).max(ln_c - neg_ln_scale(m));
            let s = isa.exp_above(&a, amax, -LOG_CUTOFF - 1.0, floor, &mut e);
            if s == 0.0 {
                acc.log_likelihood += ln_norm + ln_c;
                continue;
            }
            // log(Σ e^a + c) = amax + log(s + c·e^-amax)
            let ln_s = s.ln();
            let ln_out = ln_c - amax;
            let ln_den_shifted = if ln_out == f64::NEG_INFINITY {
                ln_s
            } else {
                let top = ln_s.max(ln_out);
                top + ((ln_s - top).exp() + (ln_out - top).exp()).ln()
            };
            acc.log_likelihood += ln_norm + amax + ln_den_shifted;
            let inv_den = (-ln_den_shifted).exp();
            let [pn, pyx, pyy, pyz, wsq] = isa.accumulate(&c, &e, &a, inv_den, &mut p1);
            let py = Vector3::new(pyx, pyy, pyz);
            acc.weighted_sq -= wsq * k;
            acc.np += pn;
            acc.sum_px += x * pn;
            acc.sum_px2 += pn * x.norm_squared();
            acc.cross += x * py.transpose();
        }
        for (i, &j) in cand.iter().enumerate() {
            acc.p1[j] += p1[i];
        }
        acc
    }
}

const MOVING_SUBSET_SEED: u64 = 0x6d6f76;
const FIXED_SUBSET_SEED: u64 = 0x666978;

fn subsample(cloud: &PointCloud, max: usize, seed: u64) -> Cow<'_, PointCloud> {
    if max == 0 || cloud.len() <= max {
        Cow::Borrowed(cloud)
    } else {
        Cow::Owned(cloud.downsample(max, seed))
    }
}

/// −ln(1e-16 / M): the absolute skip threshold below ln c.
fn neg_ln_scale(m: usize) -> f64 {
    16.0 * std::f64::consts::LN_10 + (m as f64).ln()
}

/// Coarse rigid alignment of `moving` onto `fixed` by EM on a Gaussian mixture.
/// Large clouds are reduced to the configured point budgets first; the E-step
/// over the retained points is exact.
pub fn register_gmm_em(
    moving: &PointCloud,
    fixed: &PointCloud,
    cfg: &GmmEmConfig,
) -> Result<RegistrationResult, RegistrationError> {
    cfg.validate()?;
    let moving = subsample(moving, cfg.max_moving_points, MOVING_SUBSET_SEED);
    let fixed = subsample(fixed, cfg.max_fixed_points, FIXED_SUBSET_SEED);
    check_nondegenerate(&moving.points, "moving")?;
    check_nondegenerate(&fixed.points, "fixed")?;

    // Work relative to the fixed centroid to limit cancellation in the
    // variance update.
    let origin = fixed.centroid().expect("non-empty").coords;
    let xs: Vec<Vector3<f64>> = fixed.points.iter().map(|p| p.coords - origin).collect();
    let ys: Vec<Vector3<f64>> = moving.points.iter().map(|p| p.coords - origin).collect();
    let volume = outlier_volume(&fixed.points);
    let w = cfg.outlier_weight;
    let chunks = FixedChunks::new(&xs);

    let mut sigma2 = if cfg.sigma2_init > 0.0 {
        cfg.sigma2_init
    } else {
        default_sigma2(&fixed.points)
    };
    // Centered-frame transform.
    let mut rot = Matrix3::identity();
    let mut trans = Vector3::zeros();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_mse;

    loop {
        let ty: Vec<Vector3<f64>> = ys.iter().map(|y| rot * y + trans).collect();
        let e = e_step(&chunks, &ys, &ty, sigma2, w, volume);
        if !e.log_likelihood.is_finite() {
            return Err(RegistrationError::NumericalFailure(format!(
                "non-finite log-likelihood at sigma² = {sigma2:e}"
            )));
        }
        if !(e.np > 1e-9) {
            return Err(RegistrationError::NumericalFailure(format!(
                "all fixed points assigned to the outlier component (sigma² = {sigma2:e})"
            )));
        }
        last_mse = e.weighted_sq / e.np;
        if let Some(&prev) = objective.last() {
            let prev: f64 = prev;
            if (e.log_likelihood - prev).abs() <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
                objective.push(e.log_likelihood);
                converged = true;
                break;
            }
        }
        objective.push(e.log_likelihood);
        if iterations == cfg.max_iterations {
            break;
        }

        // M-step
        let np = e.np;
        let mu_x = e.sum_px / np;
        let sum_py = ys
            .iter()
            .zip(&e.p1)
            .fold(Vector3::zeros(), |acc, (y, &p)| acc + y * p);
        let mu_y = sum_py / np;
        let a = e.cross - mu_x * sum_py.transpose();
        rot = rotation_from_cross_covariance(&a);
        trans = mu_x - rot * mu_y;
        let sum_py2: f64 = ys
            .iter()
            .zip(&e.p1)
            .map(|(y, &p)| p * y.norm_squared())
            .sum();
        let xx = e.sum_px2 - np * mu_x.norm_squared();
        let yy = sum_py2 - np * mu_y.norm_squared();
        let new_sigma2 = ((xx - 2.0 * (a.transpose() * rot).trace() + yy) / (3.0 * np)).max(0.0);
        iterations += 1;
        if !new_sigma2.is_finite() {
            return Err(RegistrationError::NumericalFailure(
                "variance update is not finite".into(),
            ));
        }
        if new_sigma2 < SIGMA2_FLOOR {
            // Exact fit: the mixture has collapsed onto the fixed points.
            converged = true;
            last_mse = 3.0 * new_sigma2;
            break;
        }
        sigma2 = new_sigma2;
    }

    // Back to the original frame: x = R (y - o) + t' + o.
    let transform = RigidTransform {
        rotation: rot,
        translation: trans + origin - rot * origin,
    };
    Ok(RegistrationResult {
        transform,
        final_mse: last_mse,
        iterations_used: iterations,
        converged,
        em_objective: objective,
        icp_mse: Vec::new(),
    })
}

/// Weighted-free Procrustes over index pairs (moving, fixed).
fn procrustes(moving: &[Point3], fixed: &[Point3], pairs: &[(usize, usize)]) -> RigidTransform {
    let n = pairs.len() as f64;
    let (sy, sx) = pairs
        .iter()
        .fold((Vector3::zeros(), Vector3::zeros()), |(sy, sx), &(m, f)| {
            (sy + moving[m].coords, sx + fixed[f].coords)
        });
    let mu_y = sy / n;
    let mu_x = sx / n;
    let a = pairs.iter().fold(Matrix3::zeros(), |acc, &(m, f)| {
        acc + (fixed[f].coords - mu_x) * (moving[m].coords - mu_y).transpose()
    });
    let rot = rotation_from_cross_covariance(&a);
    RigidTransform {
        rotation: rot,
        translation: mu_x - rot * mu_y,
    }
}

struct Matches {
    pairs: Vec<(usize, usize)>,
    objective: f64,
}

fn match_points(moving: &[Point3], tree: &KdTree, t: &RigidTransform, max_dist: f64) -> Matches {
    let cap = max_dist * max_dist;
    let mut pairs = Vec::with_capacity(moving.len());
    let mut total = 0.0;
    for (i, p) in moving.iter().enumerate() {
        let (j, d2) = tree.nearest(&t.apply(p)).expect("non-empty tree");
        if d2 <= cap {
            pairs.push((i, j));
            total += d2;
        } else {
            total += cap;
        }
    }
    Matches {
        pairs,
        objective: total / moving.len() as f64,
    }
}

/// Point-to-point ICP refinement starting from `init`.
pub fn register_icp(
    moving: &PointCloud,
    fixed: &PointCloud,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<RegistrationResult, RegistrationError> {
    cfg.validate()?;
    check_nondegenerate(&moving.points, "moving")?;
    check_nondegenerate(&fixed.points, "fixed")?;
    let tree = KdTree::build(&fixed.points);

    let mut current = *init;
    let mut matches = match_points(&moving.points, &tree, &current, cfg.max_corr_dist);
    if matches.pairs.is_empty() {
        return Err(RegistrationError::NoCorrespondences {
            max_corr_dist: cfg.max_corr_dist,
        });
    }
    let mut trace = vec![matches.objective];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.iterations {
        if matches.pairs.len() < 3 {
            break;
        }
        let candidate = procrustes(&moving.points, &fixed.points, &matches.pairs);
        let next = match_points(&moving.points, &tree, &candidate, cfg.max_corr_dist);
        if next.pairs.is_empty() || next.objective > matches.objective {
            // Rounding can nudge the objective up once the optimum is reached.
            converged = true;
            break;
        }
        let improvement = matches.objective - next.objective;
        current = candidate;
        iterations += 1;
        trace.push(next.objective);
        let done = improvement <= cfg.tol * matches.objective;
        matches = next;
        if done {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        transform: current,
        final_mse: matches.objective,
        iterations_used: iterations,
        converged,
        em_objective: Vec::new(),
        icp_mse: trace,
    })
}

/// EM coarse alignment seeding ICP refinement.
pub fn register_coarse_to_fine(
    moving: &PointCloud,
    fixed: &PointCloud,
    gmm: &GmmEmConfig,
    icp: &IcpConfig,
) -> Result<RegistrationResult, RegistrationError> {
    let coarse = register_gmm_em(moving, fixed, gmm)?;
    let fine = register_icp(moving, fixed, &coarse.transform, icp)?;
    Ok(RegistrationResult {
        transform: fine.transform.orthonormalized(),
        final_mse: fine.final_mse,
        iterations_used: coarse.iterations_used + fine.iterations_used,
        converged: fine.converged,
        em_objective: coarse.em_objective,
        icp_mse: fine.icp_mse,
    })
}

/// Count of adjacent pairs where `trace` moves the wrong way by more than a
/// relative rounding slack.
pub fn monotonicity_violations(trace: &[f64], increasing: bool) -> usize {
    trace
        .windows(2)
        .filter(|w| {
            let slack = 1e-9 * w[0].abs().max(1e-12);
            if increasing {
                w[1] < w[0] - slack
            } else {
                w[1] > w[0] + slack
            }
        })
        .count()
}

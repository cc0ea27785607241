//! Trajectory accuracy and tracking-rate evaluation.
//!
//! Estimated and ground-truth trajectories are associated by nearest
//! timestamp, aligned by a closed-form similarity (scale optional, rigid by
//! default for metric RGB-D data), and scored as the RMSE of the translation
//! parts of the per-pair pose discrepancies, in millimeters.

use crate::geometry::{compose, inverse, PoseQuat, SE3Pose};
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory timestamps must be strictly increasing (line {0})")]
    NonMonotonic(usize),
    #[error("trajectory line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no timestamp associations within max_dt = {0}")]
    EmptyAssociation(f64),
    #[error("max_dt must be positive, got {0}")]
    BadMaxDt(f64),
    #[error("alignment needs at least 3 non-collinear position pairs: {0}")]
    DegenerateAlignment(String),
    #[error("tracking rate needs 0 <= n_tracked <= n_sum with n_sum >= 1 (got {tracked}/{sum})")]
    BadTrackingCounts { tracked: u64, sum: u64 },
}

/// Timestamped pose sequence. Poses are rig-in-world transforms.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub samples: Vec<(f64, SE3Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, SE3Pose)>) -> Result<Self, EvalError> {
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(EvalError::NonMonotonic(i + 1));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Parses the text format: one `timestamp tx ty tz qx qy qz qw` per
    /// line, `#` comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EvalError::Parse {
                    line: lineno + 1,
                    reason: e.to_string(),
                })?;
            if fields.len() != 8 {
                return Err(EvalError::Parse {
                    line: lineno + 1,
                    reason: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let pose = PoseQuat {
                qx: fields[4],
                qy: fields[5],
                qz: fields[6],
                qw: fields[7],
                tx: fields[1],
                ty: fields[2],
                tz: fields[3],
            }
            .to_pose();
            samples.push((fields[0], pose));
        }
        Self::new(samples)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# timestamp tx ty tz qx qy qz qw\n");
        for (t, pose) in &self.samples {
            let p = PoseQuat::from(pose);
            writeln!(
                out,
                "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                p.tx, p.ty, p.tz, p.qx, p.qy, p.qz, p.qw
            )
            .expect("string write");
        }
        out
    }
}

/// Greedy nearest-timestamp association within `max_dt`; each pose is used
/// at most once and pairs come back sorted by estimated-trajectory time.
pub fn associate(
    est: &Trajectory,
    gt: &Trajectory,
    max_dt: f64,
) -> Result<Vec<(usize, usize)>, EvalError> {
    if max_dt <= 0.0 {
        return Err(EvalError::BadMaxDt(max_dt));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (te, _)) in est.samples.iter().enumerate() {
        for (j, (tg, _)) in gt.samples.iter().enumerate() {
            let dt = (te - tg).abs();
            if dt <= max_dt {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite timestamps"));
    let mut used_est = vec![false; est.samples.len()];
    let mut used_gt = vec![false; gt.samples.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_est[i] && !used_gt[j] {
            used_est[i] = true;
            used_gt[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::EmptyAssociation(max_dt));
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Similarity alignment mapping estimated positions onto ground truth:
/// p_gt ~= scale * R * p_est + t. With `with_scale` false the scale is 1.
#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub transform: SE3Pose,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, pose: &SE3Pose) -> SE3Pose {
        let r = self.transform.rotation() * pose.rotation();
        let t = self.transform.rotation() * (pose.translation() * self.scale)
            + self.transform.translation();
        SE3Pose::from_parts(r, t)
    }
}

/// Closed-form least-squares alignment of paired positions (Horn/Umeyama
/// style: centroids, SVD of the cross-covariance, optional scale).
pub fn align(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Alignment, EvalError> {
    assert_eq!(est.len(), gt.len());
    if est.len() < 3 {
        return Err(EvalError::DegenerateAlignment(format!(
            "{} pairs",
            est.len()
        )));
    }
    let n = est.len() as f64;
    let centroid_e: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let centroid_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;
    let mut w = Matrix3::<f64>::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt.iter()) {
        let de = e - centroid_e;
        w += (g - centroid_g) * de.transpose();
        var_e += de.norm_squared();
    }
    let svd = w.svd(true, true);
    let sigma = svd.singular_values;
    if sigma[0] <= 0.0 || sigma[1] <= 1e-12 * sigma[0] {
        return Err(EvalError::DegenerateAlignment(format!(
            "singular values {:.3e}, {:.3e}, {:.3e}",
            sigma[0], sigma[1], sigma[2]
        )));
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if with_scale {
        // Umeyama scale: tr(D S) / var(est), with S the singular values.
        let traced = sigma[0] * d[(0, 0)] + sigma[1] * d[(1, 1)] + sigma[2] * d[(2, 2)];
        traced / var_e
    } else {
        1.0
    };
    let translation = centroid_g - rotation * (centroid_e * scale);
    Ok(Alignment {
        transform: SE3Pose::from_parts(rotation, translation),
        scale,
    })
}

/// Absolute-trajectory-error report; all distances in millimeters.
#[derive(Clone, Debug, Serialize)]
pub struct AteReport {
    pub rmse_mm: f64,
    pub per_frame_mm: Vec<f64>,
    /// Timestamps of the associated estimated poses, parallel to
    /// `per_frame_mm` (plot-ready series).
    pub timestamps: Vec<f64>,
    pub pairs: usize,
    pub alignment: PoseQuat,
    pub scale: f64,
}

impl AteReport {
    /// The RMSE must be recomputable from the per-frame series.
    pub fn recompute_rmse(&self) -> f64 {
        let n = self.per_frame_mm.len().max(1) as f64;
        (self.per_frame_mm.iter().map(|e| e * e).sum::<f64>() / n).sqrt()
    }
}

/// Associates, aligns, and scores: per pair the discrepancy transform is
/// T_rel = T_gt^-1 * S * T_est and the error is the norm of its translation.
pub fn ate_rmse(
    est: &Trajectory,
    gt: &Trajectory,
    max_dt: f64,
    with_scale: bool,
) -> Result<AteReport, EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    let est_pos: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(i, _)| *est.samples[*i].1.translation())
        .collect();
    let gt_pos: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(_, j)| *gt.samples[*j].1.translation())
        .collect();
    let alignment = align(&est_pos, &gt_pos, with_scale)?;

    let mut per_frame_mm = Vec::with_capacity(pairs.len());
    let mut timestamps = Vec::with_capacity(pairs.len());
    for (i, j) in &pairs {
        let aligned = alignment.apply(&est.samples[*i].1);
        let rel = compose(&inverse(&gt.samples[*j].1), &aligned);
        per_frame_mm.push(rel.translation().norm() * 1000.0);
        timestamps.push(est.samples[*i].0);
    }
    let rmse_mm =
        (per_frame_mm.iter().map(|e| e * e).sum::<f64>() / per_frame_mm.len() as f64).sqrt();
    Ok(AteReport {
        rmse_mm,
        per_frame_mm,
        timestamps,
        pairs: pairs.len(),
        alignment: PoseQuat::from(&alignment.transform),
        scale: alignment.scale,
    })
}

/// Fraction of frames successfully tracked.
pub fn tracking_rate(n_tracked: u64, n_sum: u64) -> Result<f64, EvalError> {
    if n_sum < 1 || n_tracked > n_sum {
        return Err(EvalError::BadTrackingCounts {
            tracked: n_tracked,
            sum: n_sum,
        });
    }
    Ok(n_tracked as f64 / n_sum as f64)
}

/// One run's scores, fed to [`summarize`].
#[derive(Clone, Debug, Serialize)]
pub struct RunScore {
    pub sequence: String,
    pub ate_mm: f64,
    pub tracking_rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SequenceSummary {
    pub sequence: String,
    pub runs: usize,
    pub median_ate_mm: f64,
    pub median_tracking_rate: f64,
}

/// Per-sequence medians across runs, in first-appearance order.
pub fn summarize(runs: &[RunScore]) -> Vec<SequenceSummary> {
    let mut order: Vec<String> = Vec::new();
    for r in runs {
        if !order.contains(&r.sequence) {
            order.push(r.sequence.clone());
        }
    }
    order
        .iter()
        .map(|name| {
            let ates: Vec<f64> = runs
                .iter()
                .filter(|r| &r.sequence == name)
                .map(|r| r.ate_mm)
                .collect();
            let rates: Vec<f64> = runs
                .iter()
                .filter(|r| &r.sequence == name)
                .map(|r| r.tracking_rate)
                .collect();
            SequenceSummary {
                sequence: name.clone(),
                runs: ates.len(),
                median_ate_mm: median(&ates),
                median_tracking_rate: median(&rates),
            }
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Plot-ready CSV of the per-frame error series.
pub fn per_frame_csv(report: &AteReport) -> String {
    let mut out = String::from("timestamp,error_mm\n");
    for (t, e) in report.timestamps.iter().zip(&report.per_frame_mm) {
        writeln!(out, "{t:.6},{e:.6}").expect("string write");
    }
    out
}

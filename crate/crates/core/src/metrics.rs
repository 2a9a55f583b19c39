//! Correspondence and registration metrics: inlier ratio, feature matching
//! recall, registration recall, non-rigid feature matching recall, scene
//! flow errors and pose-error AUC.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::RigidTransform;
use crate::sampler::CorrespondenceSet;
use crate::synth::ScenePair;

pub const DEFAULT_INLIER_TAU: f64 = 0.1;
pub const DEFAULT_FMR_TAU: f64 = 0.05;
pub const DEFAULT_RMSE_TAU: f64 = 0.2;
pub const DEFAULT_NFMR_K: usize = 3;
pub const DEFAULT_NFMR_TAU: f64 = 0.04;
pub const DEFAULT_AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

/// A ratio plus a flag set when the input was empty and the value is a
/// placeholder 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedRatio {
    pub value: f64,
    pub empty: bool,
}

/// Fraction of predicted pairs whose target lies within `tau` of the
/// ground-truth image of the source point.
pub fn inlier_ratio(corr: &CorrespondenceSet, pair: &ScenePair, tau: f64) -> Result<FlaggedRatio> {
    if corr.is_empty() {
        return Ok(FlaggedRatio {
            value: 0.0,
            empty: true,
        });
    }
    let (n, m) = (pair.source.len(), pair.target.len());
    let mut inliers = 0usize;
    for c in &corr.pairs {
        if c.source >= n || c.target >= m {
            return Err(invalid(format!(
                "correspondence ({}, {}) out of range",
                c.source, c.target
            )));
        }
        let predicted = pair.gt_endpoint(c.source)?;
        if (predicted - pair.target.points()[c.target]).norm() < tau {
            inliers += 1;
        }
    }
    Ok(FlaggedRatio {
        value: inliers as f64 / corr.len() as f64,
        empty: false,
    })
}

/// Fraction of instances whose inlier ratio exceeds `tau_fmr`.
pub fn feature_matching_recall(irs: &[f64], tau_fmr: f64) -> Result<f64> {
    if irs.is_empty() {
        return Err(invalid("feature matching recall over an empty list"));
    }
    Ok(irs.iter().filter(|&&ir| ir > tau_fmr).count() as f64 / irs.len() as f64)
}

/// RMSE between the estimated and true images of the ground-truth-matched
/// source points.
pub fn transform_rmse(est: &RigidTransform, pair: &ScenePair) -> Result<f64> {
    let gt = pair
        .gt_transform
        .ok_or_else(|| invalid("registration metrics need a rigid ground truth"))?;
    let matched = pair.gt_pairs();
    if matched.is_empty() {
        return Err(invalid("pair has no ground-truth matches"));
    }
    let sum: f64 = matched
        .iter()
        .map(|&(i, _)| {
            let p = pair.source.points()[i];
            (est.apply(&p) - gt.apply(&p)).norm_squared()
        })
        .sum();
    Ok((sum / matched.len() as f64).sqrt())
}

/// Fraction of instances with [`transform_rmse`] below `tau_rmse`.
pub fn registration_recall(est: &[RigidTransform], pairs: &[ScenePair], tau_rmse: f64) -> Result<f64> {
    if est.len() != pairs.len() {
        return Err(invalid(format!("{} estimates for {} pairs", est.len(), pairs.len())));
    }
    if est.is_empty() {
        return Err(invalid("registration recall over an empty list"));
    }
    let mut hits = 0usize;
    for (tf, pair) in est.iter().zip(pairs) {
        if transform_rmse(tf, pair)? < tau_rmse {
            hits += 1;
        }
    }
    Ok(hits as f64 / est.len() as f64)
}

/// Flow at `x` interpolated from the `k` nearest anchors with
/// inverse-distance weights. Anchors sitting exactly on `x` take over.
pub fn interpolate_flow(x: &Vector3<f64>, anchors: &[(Vector3<f64>, Vector3<f64>)], k: usize) -> Vector3<f64> {
    let mut by_dist: Vec<(f64, usize)> = anchors
        .iter()
        .enumerate()
        .map(|(a, (pos, _))| ((pos - x).norm(), a))
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let exact: Vec<_> = by_dist.iter().take_while(|(d, _)| *d == 0.0).collect();
    if !exact.is_empty() {
        return exact.iter().map(|(_, a)| anchors[*a].1).sum::<Vector3<f64>>() / exact.len() as f64;
    }
    let nearest = &by_dist[..k.min(by_dist.len())];
    let total: f64 = nearest.iter().map(|(d, _)| 1.0 / d).sum();
    nearest.iter().map(|(d, a)| anchors[*a].1 / *d).sum::<Vector3<f64>>() / total
}

/// Fraction of ground-truth pairs whose target is recovered to within
/// `tau` by interpolating anchor flows (`target - source` of each
/// predicted correspondence).
pub fn nfmr(anchors: &CorrespondenceSet, pair: &ScenePair, k: usize, tau: f64) -> Result<FlaggedRatio> {
    if k == 0 {
        return Err(invalid("nfmr needs k >= 1"));
    }
    let gt = pair.gt_pairs();
    if gt.is_empty() {
        return Err(invalid("pair has no ground-truth matches"));
    }
    if anchors.is_empty() {
        return Ok(FlaggedRatio {
            value: 0.0,
            empty: true,
        });
    }
    let (src, tgt) = (pair.source.points(), pair.target.points());
    let mut flows = Vec::with_capacity(anchors.len());
    for c in &anchors.pairs {
        if c.source >= src.len() || c.target >= tgt.len() {
            return Err(invalid(format!("anchor ({}, {}) out of range", c.source, c.target)));
        }
        flows.push((src[c.source], tgt[c.target] - src[c.source]));
    }
    let mut recovered = 0usize;
    for &(i, _) in &gt {
        let endpoint = src[i] + interpolate_flow(&src[i], &flows, k);
        if (endpoint - pair.gt_endpoint(i)?).norm() < tau {
            recovered += 1;
        }
    }
    Ok(FlaggedRatio {
        value: recovered as f64 / gt.len() as f64,
        empty: false,
    })
}

/// Absolute (meters) and relative (fraction of `|gt|`) thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowThresholds {
    pub strict_abs: f64,
    pub strict_rel: f64,
    pub relaxed_abs: f64,
    pub relaxed_rel: f64,
    pub outlier_abs: f64,
    pub outlier_rel: f64,
}

impl Default for FlowThresholds {
    fn default() -> Self {
        Self {
            strict_abs: 0.025,
            strict_rel: 0.025,
            relaxed_abs: 0.05,
            relaxed_rel: 0.05,
            outlier_abs: 0.3,
            outlier_rel: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub epe: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub outlier: f64,
}

pub fn flow_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>], th: &FlowThresholds) -> Result<FlowMetrics> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "{} predicted vs {} true flow vectors",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(invalid("flow metrics over an empty field"));
    }
    let (mut epe, mut acc_s, mut acc_r, mut outlier) = (0.0, 0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let err = (p - g).norm();
        let mag = g.norm();
        epe += err;
        if err < th.strict_abs || err < th.strict_rel * mag {
            acc_s += 1;
        }
        if err < th.relaxed_abs || err < th.relaxed_rel * mag {
            acc_r += 1;
        }
        if err > th.outlier_abs || err > th.outlier_rel * mag {
            outlier += 1;
        }
    }
    let n = pred.len() as f64;
    Ok(FlowMetrics {
        epe: epe / n,
        acc_s: acc_s as f64 / n,
        acc_r: acc_r as f64 / n,
        outlier: outlier as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseAuc {
    pub threshold_deg: f64,
    pub auc: f64,
}

/// Area under the recall-vs-error curve on `[0, threshold]`, divided by
/// the threshold; trapezoidal over the sorted errors.
pub fn pose_auc(errors_deg: &[f64], thresholds: &[f64]) -> Result<Vec<PoseAuc>> {
    if errors_deg.is_empty() {
        return Err(invalid("pose AUC over an empty error list"));
    }
    if errors_deg.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(invalid("pose errors must be nonnegative"));
    }
    if thresholds.iter().any(|t| t.is_nan() || *t <= 0.0) {
        return Err(invalid("AUC thresholds must be positive"));
    }
    let mut sorted = errors_deg.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut errs = vec![0.0];
    errs.extend_from_slice(&sorted);
    let mut recall = vec![0.0];
    recall.extend((1..=sorted.len()).map(|k| k as f64 / n));
    Ok(thresholds
        .iter()
        .map(|&t| {
            let last = errs.partition_point(|&e| e < t);
            let mut xs = errs[..last].to_vec();
            let mut ys = recall[..last].to_vec();
            xs.push(t);
            ys.push(recall[last - 1]);
            let area: f64 = xs
                .windows(2)
                .zip(ys.windows(2))
                .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
                .sum();
            PoseAuc {
                threshold_deg: t,
                auc: area / t,
            }
        })
        .collect())
}

/// Larger of the rotation angle and the angle between translation
/// directions, in degrees.
pub fn pose_error_deg(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let rot = est.rotation_angle_to(gt).to_degrees();
    let (a, b) = (est.translation, gt.translation);
    let trans = if a.norm() == 0.0 || b.norm() == 0.0 {
        0.0
    } else {
        (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
    };
    rot.max(trans)
}

/// Aggregate metrics of a run. Fields that do not apply to the run's task
/// are omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ir: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fmr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nfmr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outlier: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub pose_auc: Vec<PoseAuc>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{Correspondence, ExtractMode};
    use crate::synth::{make_deformable_pair, make_rigid_pair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(pairs: &[(usize, usize)]) -> CorrespondenceSet {
        CorrespondenceSet {
            pairs: pairs
                .iter()
                .map(|&(source, target)| Correspondence {
                    source,
                    target,
                    score: 1.0,
                })
                .collect(),
            mode: ExtractMode::MutualArgmax,
            clipped: false,
        }
    }

    #[test]
    fn inlier_ratio_cases() {
        let pair = make_rigid_pair(30, 0.0, 1.0, 1).unwrap();
        let gt = pair.gt_pairs();
        assert_eq!(inlier_ratio(&set(&gt), &pair, 0.1).unwrap().value, 1.0);
        let empty = inlier_ratio(&set(&[]), &pair, 0.1).unwrap();
        assert!(empty.empty && empty.value == 0.0);

        // Pair each source with the target of the farthest point.
        let shuffled: Vec<_> = gt
            .iter()
            .map(|&(i, _)| {
                let far = gt
                    .iter()
                    .max_by(|a, b| {
                        let da = (pair.source.points()[a.0] - pair.source.points()[i]).norm();
                        let db = (pair.source.points()[b.0] - pair.source.points()[i]).norm();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                (i, far.1)
            })
            .collect();
        assert_eq!(inlier_ratio(&set(&shuffled), &pair, 0.1).unwrap().value, 0.0);
        assert!(inlier_ratio(&set(&[(99, 0)]), &pair, 0.1).is_err());
    }

    #[test]
    fn fmr_cases() {
        assert_eq!(feature_matching_recall(&[1.0, 1.0], DEFAULT_FMR_TAU).unwrap(), 1.0);
        assert_eq!(feature_matching_recall(&[0.04, 0.06], 0.05).unwrap(), 0.5);
        assert!(feature_matching_recall(&[], 0.05).is_err());
    }

    #[test]
    fn registration_recall_cases() {
        let pairs: Vec<_> = (0..4).map(|s| make_rigid_pair(10, 0.0, 0.7, s).unwrap()).collect();
        let gts: Vec<_> = pairs.iter().map(|p| p.gt_transform.unwrap()).collect();
        assert_eq!(registration_recall(&gts, &pairs, 0.2).unwrap(), 1.0);
        let shift = RigidTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::x(),
        };
        let off: Vec<_> = gts.iter().map(|g| shift.compose(g)).collect();
        assert_eq!(registration_recall(&off, &pairs, 0.2).unwrap(), 0.0);
        assert!(registration_recall(&gts[..1], &pairs, 0.2).is_err());
        let def = make_deformable_pair(10, 0.1, 1.0, 0).unwrap();
        assert!(transform_rmse(&gts[0], &def).is_err());
    }

    #[test]
    fn nfmr_cases() {
        let pair = make_deformable_pair(40, 0.1, 3.0, 2).unwrap();
        let gt = pair.gt_pairs();
        assert_eq!(nfmr(&set(&gt), &pair, 3, DEFAULT_NFMR_TAU).unwrap().value, 1.0);
        assert!(nfmr(&set(&[]), &pair, 3, 0.04).unwrap().empty);

        // freq = 0 leaves a zero field; use a constant shift instead.
        let mut shifted = make_deformable_pair(40, 0.0, 1.0, 3).unwrap();
        let delta = Vector3::new(0.3, -0.2, 0.1);
        let moved: Vec<_> = shifted.target.points().iter().map(|p| p + delta).collect();
        shifted.target = crate::geometry::PointCloud::new(moved).unwrap();
        shifted.gt_flow = Some(vec![delta; 40]);
        let one = set(&shifted.gt_pairs()[..1]);
        assert_eq!(nfmr(&one, &shifted, 3, 0.04).unwrap().value, 1.0);

        // Anchors pointing at far-away targets.
        let far = pair
            .gt_pairs()
            .iter()
            .map(|&(i, _)| {
                let (j, _) = pair
                    .target
                    .points()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| {
                        let p = pair.source.points()[i];
                        (a.1 - p).norm().total_cmp(&(b.1 - p).norm())
                    })
                    .unwrap();
                (i, j)
            })
            .collect::<Vec<_>>();
        assert_eq!(nfmr(&set(&far), &pair, 1, 0.04).unwrap().value, 0.0);
    }

    #[test]
    fn interpolation_exact_hit_and_weights() {
        let anchors = vec![
            (Vector3::zeros(), Vector3::x()),
            (Vector3::new(2.0, 0.0, 0.0), Vector3::y()),
        ];
        assert_eq!(interpolate_flow(&Vector3::zeros(), &anchors, 2), Vector3::x());
        let mid = interpolate_flow(&Vector3::new(1.0, 0.0, 0.0), &anchors, 2);
        assert!((mid - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
        let near = interpolate_flow(&Vector3::new(0.5, 0.0, 0.0), &anchors, 1);
        assert_eq!(near, Vector3::x());
    }

    #[test]
    fn flow_metric_cases() {
        let th = FlowThresholds::default();
        let gt: Vec<_> = (0..10).map(|k| Vector3::new(k as f64, 1.0, 0.0)).collect();
        let m = flow_metrics(&gt, &gt, &th).unwrap();
        assert_eq!((m.epe, m.acc_s, m.acc_r, m.outlier), (0.0, 1.0, 1.0, 0.0));
        let zeros = vec![Vector3::zeros(); 4];
        assert_eq!(flow_metrics(&zeros, &zeros, &th).unwrap().epe, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let big: Vec<_> = (0..50)
            .map(|_| Vector3::new(rng.random_range(1.0..3.0), rng.random_range(-3.0..3.0), 5.0))
            .collect();
        let pred: Vec<_> = big.iter().map(|g| g + Vector3::new(0.04, 0.0, 0.0)).collect();
        let m = flow_metrics(&pred, &big, &th).unwrap();
        let mut strict = 0;
        for g in &big {
            let err: f64 = 0.04;
            if err < 0.025 || err / g.norm() < 0.025 {
                strict += 1;
            }
        }
        assert!((m.acc_s - strict as f64 / 50.0).abs() < 1e-12);
        assert_eq!(m.acc_r, 1.0);
        assert!((m.epe - 0.04).abs() < 1e-12);
        assert!(flow_metrics(&pred[..3], &big, &th).is_err());
    }

    #[test]
    fn pose_auc_cases() {
        let t = DEFAULT_AUC_THRESHOLDS;
        assert!(pose_auc(&[0.0; 5], &t).unwrap().iter().all(|a| a.auc == 1.0));
        assert!(pose_auc(&[25.0, 30.0], &t).unwrap().iter().all(|a| a.auc == 0.0));
        let uniform: Vec<f64> = (0..1000).map(|k| 10.0 * (k as f64 + 0.5) / 1000.0).collect();
        let auc = pose_auc(&uniform, &[10.0]).unwrap()[0].auc;
        assert!((auc - 0.5).abs() < 0.02);
        assert!(pose_auc(&[], &t).is_err());
        let aucs = pose_auc(&uniform, &[2.0, 5.0, 10.0, 20.0]).unwrap();
        for w in aucs.windows(2) {
            assert!(w[0].auc <= w[1].auc);
        }
    }

    #[test]
    fn pose_error_of_identical_is_zero() {
        let pair = make_rigid_pair(8, 0.0, 1.0, 5).unwrap();
        let gt = pair.gt_transform.unwrap();
        assert!(pose_error_deg(&gt, &gt) < 1e-6);
    }

    #[test]
    fn report_serializes_without_missing_fields() {
        let r = MetricsReport {
            ir: Some(0.5),
            ..Default::default()
        };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"ir":0.5}"#);
    }
}

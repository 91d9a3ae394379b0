//! Salient-feature-weighted iterative closest point (wICP) rigid
//! registration.

use nalgebra::Matrix3;

use super::RigidTransform;
use crate::error::{Error, Result};
use crate::mesh::knn;

/// Outcome of a wICP run.
#[derive(Debug, Clone)]
pub struct WicpReport {
    pub transform: RigidTransform,
    /// Weighted RMS distance (mm) at the final correspondence.
    pub final_rms: f64,
    pub iterations: usize,
    /// Weighted RMS after each fit, non-increasing.
    pub rms_history: Vec<f64>,
}

/// Weighted closed-form rigid fit: finds `R, t` minimizing
/// `sum_i w_i ||R s_i + t - c_i||^2` via the weighted cross-covariance and
/// orthogonal Procrustes (SVD with determinant correction).
pub fn weighted_procrustes(
    source: &[[f64; 3]],
    target: &[[f64; 3]],
    weights: &[f64],
) -> Result<RigidTransform> {
    if source.len() != target.len() || source.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_procrustes",
            expected: format!("matching source/target/weight lengths ({})", source.len()),
            got: format!("{} targets, {} weights", target.len(), weights.len()),
        });
    }
    let w_sum: f64 = weights.iter().sum();
    if !(w_sum > 0.0) {
        return Err(Error::invalid("total correspondence weight must be positive"));
    }
    let mut s_bar = [0.0; 3];
    let mut c_bar = [0.0; 3];
    for ((s, c), &w) in source.iter().zip(target).zip(weights) {
        for a in 0..3 {
            s_bar[a] += w * s[a];
            c_bar[a] += w * c[a];
        }
    }
    for a in 0..3 {
        s_bar[a] /= w_sum;
        c_bar[a] /= w_sum;
    }
    let mut h = Matrix3::<f64>::zeros();
    for ((s, c), &w) in source.iter().zip(target).zip(weights) {
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] += w * (s[i] - s_bar[i]) * (c[j] - c_bar[j]);
            }
        }
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sigma = svd.singular_values;
    // Rank < 2 leaves a rotation about an axis unconstrained.
    if !(sigma[1] > 1e-12 * sigma[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateConfiguration {
            context: format!(
                "rank-deficient cross-covariance (singular values {:.3e}, {:.3e}, {:.3e})",
                sigma[0], sigma[1], sigma[2]
            ),
        });
    }
    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, det.signum()));
    let r = v * d * u.transpose();
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = r[(i, j)];
        }
    }
    let mut translation = [0.0; 3];
    for a in 0..3 {
        translation[a] = c_bar[a] - (r[(a, 0)] * s_bar[0] + r[(a, 1)] * s_bar[1] + r[(a, 2)] * s_bar[2]);
    }
    let transform = RigidTransform {
        rotation,
        translation,
    };
    transform.validate()?;
    Ok(transform)
}

fn weighted_rms(source: &[[f64; 3]], target: &[[f64; 3]], weights: &[f64], t: &RigidTransform) -> f64 {
    let w_sum: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for ((s, c), &w) in source.iter().zip(target).zip(weights) {
        let p = t.apply(*s);
        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
        acc += w * d2;
    }
    (acc / w_sum).sqrt()
}

/// Weighted ICP: alternates nearest-neighbor correspondence against
/// `target` with a weighted closed-form rigid fit, starting from the
/// identity. Stops when the weighted RMS decreases by less than `tol`
/// between iterations, or after `max_iter` fits.
pub fn wicp_register(
    source: &[[f64; 3]],
    weights: &[f64],
    target: &[[f64; 3]],
    max_iter: usize,
    tol: f64,
) -> Result<WicpReport> {
    if source.is_empty() {
        return Err(Error::EmptyInput("wICP source points"));
    }
    if target.is_empty() {
        return Err(Error::EmptyInput("wICP target points"));
    }
    if source.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "wicp_register",
            expected: format!("{} weights", source.len()),
            got: format!("{}", weights.len()),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("wICP weights must be finite and non-negative"));
    }
    let positive: Vec<&[f64; 3]> = source
        .iter()
        .zip(weights)
        .filter_map(|(s, &w)| (w > 0.0).then_some(s))
        .collect();
    if positive.len() < 3 {
        return Err(Error::TooFewConstraints {
            needed: 3,
            got: positive.len(),
        });
    }
    if max_iter == 0 {
        return Err(Error::invalid("wICP max_iter must be at least 1"));
    }

    let mut transform = RigidTransform::identity();
    let mut rms_history = Vec::new();
    let mut correspondences: Vec<[f64; 3]> = vec![[0.0; 3]; source.len()];
    for _ in 0..max_iter {
        let moved = transform.apply_all(source);
        let nn = knn(&moved, target, 1)?;
        for (c, idx) in correspondences.iter_mut().zip(&nn) {
            *c = target[idx[0]];
        }
        transform = weighted_procrustes(source, &correspondences, weights)?;
        let rms = weighted_rms(source, &correspondences, weights, &transform);
        let done = rms_history
            .last()
            .map(|prev| prev - rms < tol)
            .unwrap_or(false);
        rms_history.push(rms);
        if done {
            break;
        }
    }
    Ok(WicpReport {
        transform,
        final_rms: *rms_history.last().expect("at least one iteration"),
        iterations: rms_history.len(),
        rms_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                ]
            })
            .collect()
    }

    fn rot_z(angle: f64) -> RigidTransform {
        let (s, c) = angle.sin_cos();
        RigidTransform {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    fn rotation_angle(a: &RigidTransform, b: &RigidTransform) -> f64 {
        // angle of a * b^{-1}
        let rel = a.compose(&b.inverse());
        let trace = rel.rotation[0][0] + rel.rotation[1][1] + rel.rotation[2][2];
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn identical_clouds_give_identity() {
        let pts = cloud(25, 7);
        let weights = vec![1.0; pts.len()];
        let report = wicp_register(&pts, &weights, &pts, 20, 1e-12).unwrap();
        assert!(report.final_rms < 1e-10, "rms {}", report.final_rms);
        let angle = rotation_angle(&report.transform, &RigidTransform::identity());
        assert!(angle < 1e-8);
        for a in 0..3 {
            assert!(report.transform.translation[a].abs() < 1e-8);
        }
    }

    #[test]
    fn procrustes_recovers_known_transform() {
        let pts = cloud(30, 11);
        let mut truth = rot_z(0.8);
        truth.translation = [4.0, -2.5, 1.25];
        let target = truth.apply_all(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights: Vec<f64> = (0..pts.len()).map(|_| rng.gen_range(0.1..2.0)).collect();
        let rec = weighted_procrustes(&pts, &target, &weights).unwrap();
        assert!(rotation_angle(&rec, &truth) < 1e-6, "angle off");
        for a in 0..3 {
            assert!((rec.translation[a] - truth.translation[a]).abs() < 1e-8);
        }
    }

    #[test]
    fn full_wicp_recovers_small_motion() {
        let pts = cloud(60, 21);
        let mut truth = rot_z(0.05);
        truth.translation = [1.0, 0.5, -0.75];
        let target = truth.apply_all(&pts);
        let weights = vec![1.0; pts.len()];
        let report = wicp_register(&pts, &weights, &target, 50, 1e-12).unwrap();
        assert!(report.final_rms < 1e-8, "rms {}", report.final_rms);
        assert!(rotation_angle(&report.transform, &truth) < 1e-6);
    }

    #[test]
    fn weight_scaling_does_not_change_the_fit() {
        let pts = cloud(40, 5);
        let target = cloud(40, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weights: Vec<f64> = (0..pts.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
        let scaled: Vec<f64> = weights.iter().map(|w| w * 3.7).collect();
        let a = wicp_register(&pts, &weights, &target, 15, 0.0).unwrap();
        let b = wicp_register(&pts, &scaled, &target, 15, 0.0).unwrap();
        for i in 0..3 {
            assert!((a.transform.translation[i] - b.transform.translation[i]).abs() < 1e-12);
            for j in 0..3 {
                assert!((a.transform.rotation[i][j] - b.transform.rotation[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rms_history_is_non_increasing() {
        let pts = cloud(80, 31);
        // target: rotated cloud with an extra unrelated blob to make
        // correspondences nontrivial
        let mut target = rot_z(0.3).apply_all(&pts);
        target.extend(cloud(40, 32).iter().map(|p| [p[0] + 20.0, p[1], p[2]]));
        let weights = vec![1.0; pts.len()];
        let report = wicp_register(&pts, &weights, &target, 40, 0.0).unwrap();
        for pair in report.rms_history.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "rms increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn collinear_sources_are_rejected() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let weights = vec![1.0; pts.len()];
        let target = cloud(10, 2);
        match wicp_register(&pts, &weights, &target, 5, 1e-9) {
            Err(Error::DegenerateConfiguration { .. }) => {}
            other => panic!("expected degenerate-configuration error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_positive_weights_rejected() {
        let pts = cloud(5, 1);
        let weights = vec![1.0, 1.0, 0.0, 0.0, 0.0];
        match wicp_register(&pts, &weights, &pts, 5, 1e-9) {
            Err(Error::TooFewConstraints { needed: 3, got: 2 }) => {}
            other => panic!("expected too-few-constraints error, got {other:?}"),
        }
    }
}

//! Seeded synthetic scene pairs: rigid pairs with partial overlap,
//! smoothly deformed pairs, and descriptors of tunable discriminability.

use nalgebra::{DMatrix, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::geometry::{random_rotation, PointCloud, RigidTransform};
use crate::matmath::MatchingMatrix;

// Distinct streams so that features do not reuse geometry randomness.
const FEATURE_STREAM: u64 = 0x6665_6174;

/// A source/target pair with its ground truth. Exactly one of
/// `gt_transform` and `gt_flow` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt_transform: Option<RigidTransform>,
    /// Per-source-point displacement.
    pub gt_flow: Option<Vec<Vector3<f64>>>,
    /// `N x M` 0/1 matrix; rows and columns without a partner are zero.
    pub gt_matrix: MatchingMatrix,
    pub overlap_ratio: f64,
    pub seed: u64,
}

impl ScenePair {
    /// Ground-truth `(source, target)` pairs in row order.
    pub fn gt_pairs(&self) -> Vec<(usize, usize)> {
        let w = self.gt_matrix.entries();
        let mut out = Vec::new();
        for i in 0..w.nrows() {
            if let Some(j) = (0..w.ncols()).find(|&j| w[(i, j)] > 0.5) {
                out.push((i, j));
            }
        }
        out
    }

    /// Where source point `i` lands under the ground truth.
    pub fn gt_endpoint(&self, i: usize) -> Result<Vector3<f64>> {
        let p = self.source.points()[i];
        match (&self.gt_transform, &self.gt_flow) {
            (Some(tf), _) => Ok(tf.apply(&p)),
            (None, Some(flow)) => Ok(p + flow[i]),
            (None, None) => Err(invalid("scene pair has no ground truth")),
        }
    }

    pub fn is_rigid(&self) -> bool {
        self.gt_transform.is_some()
    }
}

fn uniform_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random(), rng.random(), rng.random())
}

fn gaussian(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Number of matched points for an overlap fraction: `ceil(overlap * n)`,
/// ignoring floating-point excess such as `0.3 * 10 = 3.0000000000000004`.
pub fn matched_count(n: usize, overlap: f64) -> usize {
    let raw = overlap * n as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (k as usize).min(n)
}

/// Rigid pair in the unit cube. `ceil(overlap * n)` source points have a
/// transformed, jittered partner; the other target points are transformed
/// distractors drawn from the same cube. Target order is shuffled.
pub fn make_rigid_pair(n: usize, noise_sigma: f64, overlap: f64, seed: u64) -> Result<ScenePair> {
    if n < 4 {
        return Err(invalid(format!("need at least 4 points, got {n}")));
    }
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(invalid(format!("overlap must lie in (0, 1], got {overlap}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(invalid(format!("noise_sigma must be nonnegative, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source: Vec<_> = (0..n).map(|_| uniform_point(&mut rng)).collect();
    let tf = RigidTransform {
        rotation: random_rotation(&mut rng),
        translation: Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ),
    };
    let k = matched_count(n, overlap);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let matched = &order[..k];

    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    let mut target = vec![Vector3::zeros(); n];
    let mut pairs = Vec::with_capacity(k);
    for (slot, &i) in slots.iter().zip(matched) {
        target[*slot] = tf.apply(&source[i]) + gaussian(&mut rng) * noise_sigma;
        pairs.push((i, *slot));
    }
    for &slot in &slots[k..] {
        target[slot] = tf.apply(&uniform_point(&mut rng)) + gaussian(&mut rng) * noise_sigma;
    }
    pairs.sort();
    Ok(ScenePair {
        source: PointCloud::new(source)?,
        target: PointCloud::new(target)?,
        gt_transform: Some(tf),
        gt_flow: None,
        gt_matrix: MatchingMatrix::from_pairs(n, n, &pairs)?,
        overlap_ratio: overlap,
        seed,
    })
}

/// `amp * [sin(freq y), sin(freq z), sin(freq x)]`.
pub fn deformation(p: &Vector3<f64>, amp: f64, freq: f64) -> Vector3<f64> {
    Vector3::new((freq * p.y).sin(), (freq * p.z).sin(), (freq * p.x).sin()) * amp
}

/// Unit-cube source displaced by [`deformation`]; every point is matched
/// and target order is shuffled.
pub fn make_deformable_pair(n: usize, amp: f64, freq: f64, seed: u64) -> Result<ScenePair> {
    if n < 4 {
        return Err(invalid(format!("need at least 4 points, got {n}")));
    }
    if !amp.is_finite() || !freq.is_finite() {
        return Err(invalid("amp and freq must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source: Vec<_> = (0..n).map(|_| uniform_point(&mut rng)).collect();
    let flow: Vec<_> = source.iter().map(|p| deformation(p, amp, freq)).collect();
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    let mut target = vec![Vector3::zeros(); n];
    for (i, &slot) in slots.iter().enumerate() {
        target[slot] = source[i] + flow[i];
    }
    let pairs: Vec<_> = slots.iter().copied().enumerate().collect();
    Ok(ScenePair {
        source: PointCloud::new(source)?,
        target: PointCloud::new(target)?,
        gt_transform: None,
        gt_flow: Some(flow),
        gt_matrix: MatchingMatrix::from_pairs(n, n, &pairs)?,
        overlap_ratio: 1.0,
        seed,
    })
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Fills both clouds with unit descriptors of width `d`. A matched target
/// gets `normalize(rho * f_source + (1 - rho) * g)` for a fresh random unit
/// `g`; everything else gets an independent descriptor.
pub fn make_features(pair: &ScenePair, rho: f64, d: usize, seed: u64) -> Result<ScenePair> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid(format!("rho must lie in [0, 1], got {rho}")));
    }
    if d == 0 {
        return Err(invalid("feature width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FEATURE_STREAM);
    let (n, m) = pair.gt_matrix.shape();
    let fs: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(d, &mut rng)).collect();
    let mut ft: Vec<Option<Vec<f64>>> = vec![None; m];
    for (i, j) in pair.gt_pairs() {
        let g = unit_vector(d, &mut rng);
        let mut mixed: Vec<f64> = fs[i].iter().zip(&g).map(|(a, b)| rho * a + (1.0 - rho) * b).collect();
        let mut norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // rho = 0.5 with g = -f_source; practically unreachable.
            mixed = g;
            norm = 1.0;
        }
        ft[j] = Some(mixed.into_iter().map(|x| x / norm).collect());
    }
    let ft: Vec<Vec<f64>> = ft
        .into_iter()
        .map(|f| f.unwrap_or_else(|| unit_vector(d, &mut rng)))
        .collect();
    let mut out = pair.clone();
    out.source =
        PointCloud::new(pair.source.points().to_vec())?.with_features(DMatrix::from_fn(n, d, |i, c| fs[i][c]))?;
    out.target =
        PointCloud::new(pair.target.points().to_vec())?.with_features(DMatrix::from_fn(m, d, |j, c| ft[j][c]))?;
    Ok(out)
}

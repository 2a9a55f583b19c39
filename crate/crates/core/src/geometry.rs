//! Point clouds, rigid transforms, weighted Procrustes, positional
//! encodings and the matrix-to-flow conversion used on pixel grids.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matmath::{MatchingMatrix, MatrixKind};

/// Feature width used by the feature generators.
pub const DEFAULT_FEATURE_DIM: usize = 528;
/// Width of the positional encoding appended by match-to-warp.
pub const DEFAULT_ENCODING_WIDTH: usize = 48;

// Lowest sinusoidal band has period 2 m.
const BASE_FREQUENCY: f64 = std::f64::consts::PI;
const FOURIER_SEED: u64 = 0x5eed_f00d;
const FOURIER_SCALE: f64 = 2.0 * std::f64::consts::PI;
// Relative size below which the second singular value marks a rank-deficient
// cross-covariance.
const RANK_TOLERANCE: f64 = 1e-10;

/// 3D points with optional per-point features (`N x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    features: Option<DMatrix<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(invalid("point cloud has non-finite coordinates"));
        }
        Ok(Self { points, features: None })
    }

    pub fn with_features(mut self, features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != self.points.len() {
            return Err(invalid(format!(
                "{} feature rows for {} points",
                features.nrows(),
                self.points.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(invalid("features have non-finite entries"));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn features(&self) -> Option<&DMatrix<f64>> {
        self.features.as_ref()
    }

    pub fn require_features(&self) -> Result<&DMatrix<f64>> {
        self.features
            .as_ref()
            .ok_or_else(|| invalid("point cloud has no features"))
    }

    /// Coordinates as an `N x 3` matrix.
    pub fn coordinate_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), 3, |i, a| self.points[i][a])
    }
}

/// Rotation plus translation, `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidTransform> for TransformRepr {
    fn from(tf: RigidTransform) -> Self {
        let r = &tf.rotation;
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [tf.translation.x, tf.translation.y, tf.translation.z],
        }
    }
}

impl From<TransformRepr> for RigidTransform {
    fn from(repr: TransformRepr) -> Self {
        Self {
            rotation: Matrix3::from_fn(|i, j| repr.rotation[i][j]),
            translation: Vector3::from(repr.translation),
        }
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `(R^T, -R^T t)`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Orthonormality and `det R = +1` to within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.amax() <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Geodesic angle in radians between the two rotations.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Result of [`soft_procrustes`]. `degenerate` marks an identity-rotation
/// fallback when the weighted cross-covariance has rank below two.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcrustesFit {
    pub transform: RigidTransform,
    pub degenerate: bool,
}

/// Weighted Kabsch alignment of `p` onto `q` using every entry of `e` as a
/// correspondence weight.
pub fn soft_procrustes(e: &MatchingMatrix, p: &PointCloud, q: &PointCloud) -> Result<ProcrustesFit> {
    let (n, m) = e.shape();
    if n != p.len() || m != q.len() {
        return Err(invalid(format!(
            "matrix {n}x{m} does not match clouds of size {} and {}",
            p.len(),
            q.len()
        )));
    }
    let w = e.entries();
    if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(invalid("procrustes weights must be finite and nonnegative"));
    }
    let total: f64 = w.sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput("matching matrix has no mass".into()));
    }
    let w = w / total;
    let row_w: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    let col_w: Vec<f64> = w.column_iter().map(|c| c.sum()).collect();
    let p_bar: Vector3<f64> = p.points().iter().zip(&row_w).map(|(x, &r)| x * r).sum();
    let q_bar: Vector3<f64> = q.points().iter().zip(&col_w).map(|(x, &c)| x * c).sum();

    let pc = DMatrix::from_fn(3, n, |a, i| p.points()[i][a] - p_bar[a]);
    let qc = DMatrix::from_fn(m, 3, |j, a| q.points()[j][a] - q_bar[a]);
    let h_dyn = pc * (&w * qc);
    let h = Matrix3::from_fn(|a, b| h_dyn[(a, b)]);

    let spread_p: f64 = p
        .points()
        .iter()
        .zip(&row_w)
        .map(|(x, &r)| r * (x - p_bar).norm_squared())
        .sum();
    let spread_q: f64 = q
        .points()
        .iter()
        .zip(&col_w)
        .map(|(x, &c)| c * (x - q_bar).norm_squared())
        .sum();
    let scale = (spread_p * spread_q).sqrt();

    let svd = h.svd(true, true);
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if scale == 0.0 || sv[1].1 <= RANK_TOLERANCE * scale {
        let transform = RigidTransform {
            rotation: Matrix3::identity(),
            translation: q_bar - p_bar,
        };
        return Ok(ProcrustesFit {
            transform,
            degenerate: true,
        });
    }
    let u = svd.u.expect("svd computed with u");
    let v = svd.v_t.expect("svd computed with v_t").transpose();
    let mut d = Matrix3::identity();
    d[(sv[2].0, sv[2].0)] = (v * u.transpose()).determinant().signum();
    let rotation = v * d * u.transpose();
    let transform = RigidTransform {
        rotation,
        translation: q_bar - rotation * p_bar,
    };
    Ok(ProcrustesFit {
        transform,
        degenerate: false,
    })
}

pub fn apply_transform(tf: &RigidTransform, p: &PointCloud) -> PointCloud {
    PointCloud {
        points: p.points.iter().map(|x| tf.apply(x)).collect(),
        features: p.features.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingKind {
    /// Per-axis sin/cos ladder with frequencies `pi * 2^k`.
    #[default]
    Sinusoidal,
    /// sin/cos of fixed Gaussian random projections.
    Fourier,
}

/// Deterministic positional encoding of `coords` (`n x dim`) into `width`
/// columns. `width` must be even and divisible by `dim`; the sinusoidal
/// ladder further needs `width / (2 dim)` whole bands.
pub fn positional_encoding(coords: &DMatrix<f64>, width: usize, kind: EncodingKind) -> Result<DMatrix<f64>> {
    let (n, dim) = coords.shape();
    if dim == 0 || width == 0 || !width.is_multiple_of(2) || !width.is_multiple_of(dim) {
        return Err(invalid(format!(
            "encoding width {width} invalid for {dim}-d coordinates"
        )));
    }
    match kind {
        EncodingKind::Sinusoidal => {
            if !width.is_multiple_of(2 * dim) {
                return Err(invalid(format!(
                    "sinusoidal width {width} not a multiple of {}",
                    2 * dim
                )));
            }
            let bands = width / (2 * dim);
            Ok(DMatrix::from_fn(n, width, |i, c| {
                let axis = c / (2 * bands);
                let band = (c % (2 * bands)) / 2;
                let phase = sinusoidal_frequency(band) * coords[(i, axis)];
                if c % 2 == 0 {
                    phase.sin()
                } else {
                    phase.cos()
                }
            }))
        }
        EncodingKind::Fourier => {
            let half = width / 2;
            let proj = fourier_projection(half, dim);
            let phases = coords * proj.transpose();
            Ok(DMatrix::from_fn(n, width, |i, c| {
                if c < half {
                    phases[(i, c)].sin()
                } else {
                    phases[(i, c - half)].cos()
                }
            }))
        }
    }
}

/// Angular frequency of sinusoidal band `k`.
pub fn sinusoidal_frequency(band: usize) -> f64 {
    BASE_FREQUENCY * (1u64 << band) as f64
}

fn fourier_projection(rows: usize, dim: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(FOURIER_SEED);
    DMatrix::from_fn(rows, dim, |_, _| FOURIER_SCALE * rng.sample::<f64, _>(StandardNormal))
}

/// Integer pixel centres of an `H x W` image, enumerated row-major as
/// `(x, y) = (column, row)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coordinate(&self, index: usize) -> Vector2<f64> {
        Vector2::new((index % self.width) as f64, (index / self.width) as f64)
    }

    pub fn coordinates(&self) -> Vec<Vector2<f64>> {
        (0..self.len()).map(|k| self.coordinate(k)).collect()
    }
}

/// Per-target-cell displacement toward the expected source coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField2D {
    pub vectors: Vec<Vector2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConversion {
    pub flow: FlowField2D,
    /// `flow + grid_q`: the expected source coordinate of each target cell.
    pub sample_grid: Vec<Vector2<f64>>,
}

/// Converts a source-by-target matching matrix into a flow field on the
/// target grid.
///
/// Raw logits are softmaxed over the source index of each target column.
/// Nonnegative kinds are only renormalized per column, so a permutation
/// maps every target cell exactly onto its matched source centre.
pub fn matrix_to_flow(e: &MatchingMatrix, grid_p: &PixelGrid, grid_q: &PixelGrid) -> Result<FlowConversion> {
    if e.shape() != (grid_p.len(), grid_q.len()) {
        return Err(invalid(format!(
            "matrix {:?} does not match grids of {} and {} cells",
            e.shape(),
            grid_p.len(),
            grid_q.len()
        )));
    }
    let src = grid_p.coordinates();
    let mut sample_grid = Vec::with_capacity(grid_q.len());
    for (j, col) in e.entries().column_iter().enumerate() {
        let weights: Vec<f64> = match e.kind() {
            MatrixKind::RawLogits => {
                let lse = crate::matmath::log_sum_exp(col.iter().copied());
                col.iter().map(|x| (x - lse).exp()).collect()
            }
            _ => {
                let s = col.sum();
                if s <= 0.0 {
                    return Err(invalid(format!("target cell {j} has no matching mass")));
                }
                col.iter().map(|x| x / s).collect()
            }
        };
        let mut acc = Vector2::zeros();
        for (w, x) in weights.iter().zip(&src) {
            acc += x * *w;
        }
        sample_grid.push(acc);
    }
    let vectors = sample_grid
        .iter()
        .enumerate()
        .map(|(j, s)| s - grid_q.coordinate(j))
        .collect();
    Ok(FlowConversion {
        flow: FlowField2D { vectors },
        sample_grid,
    })
}

/// Dense `H x W x d` feature map stored row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || height == 0 || width == 0 {
            return Err(invalid("feature map data length does not match its shape"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Bilinear lookup of `points` (`(x, y)` in cell units) with border
/// clamping. Returns one row of `channels` values per point.
pub fn grid_sample(map: &FeatureMap, points: &[Vector2<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(points.len(), map.channels);
    let (max_x, max_y) = ((map.width - 1) as f64, (map.height - 1) as f64);
    for (k, pt) in points.iter().enumerate() {
        let x = pt.x.clamp(0.0, max_x);
        let y = pt.y.clamp(0.0, max_y);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(map.width - 1), (y0 + 1).min(map.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let corners = [
            ((1.0 - fx) * (1.0 - fy), map.at(x0, y0)),
            (fx * (1.0 - fy), map.at(x1, y0)),
            ((1.0 - fx) * fy, map.at(x0, y1)),
            (fx * fy, map.at(x1, y1)),
        ];
        for c in 0..map.channels {
            out[(k, c)] = corners.iter().map(|(w, f)| w * f[c]).sum();
        }
    }
    out
}

/// Rotation drawn uniformly from SO(3) via a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

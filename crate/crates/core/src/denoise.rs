//! Training-free denoiser: predicts the clean matching matrix from a noisy
//! state by warping the source with the state's soft Procrustes fit and
//! scoring candidate pairs by feature similarity and warped distance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{
    apply_transform, positional_encoding, soft_procrustes, EncodingKind, PointCloud, RigidTransform,
    DEFAULT_ENCODING_WIDTH,
};
use crate::matmath::{sinkhorn_project, softmax_project, MatchingMatrix, DEFAULT_SINKHORN_ITERS, DEFAULT_TEMPERATURE};

/// `1 / (2 * 0.1^2)`: squared distances are measured against a 0.1 m scale.
pub const DEFAULT_LAMBDA_GEO: f64 = 50.0;
/// Unit descriptors give logits of order `1 / sqrt(d)`; this brings matched
/// pairs to a few nats at the default width.
pub const DEFAULT_TAU_FEAT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiseMode {
    /// Doubly stochastic output.
    #[default]
    Registration3d,
    /// Row-stochastic output; pixel grids are lifted to `z = 0`.
    Image2d,
}

/// Everything a denoiser sees at one sampling step.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserInput<'a> {
    pub et: &'a MatchingMatrix,
    pub p: &'a PointCloud,
    pub q: &'a PointCloud,
    pub t: usize,
    /// `alpha_bar(t)` of the schedule driving the sampler.
    pub alpha_bar: f64,
    pub mode: DenoiseMode,
}

/// Predicts `E^0` from the current state.
pub trait Denoiser: Sync {
    fn denoise(&self, input: &DenoiserInput<'_>) -> Result<MatchingMatrix>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub tau_feat: f64,
    pub lambda_geo: f64,
    pub sinkhorn_iters: usize,
    /// Scale the distance term by `alpha_bar(t)`, so that the warp read off
    /// a mostly-noise state carries little weight.
    pub time_gate: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            tau_feat: DEFAULT_TAU_FEAT,
            lambda_geo: DEFAULT_LAMBDA_GEO,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            time_gate: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_feat > 0.0 && self.tau_feat.is_finite()) {
            return Err(invalid(format!("tau_feat must be positive, got {}", self.tau_feat)));
        }
        if !(self.lambda_geo >= 0.0 && self.lambda_geo.is_finite()) {
            return Err(invalid(format!(
                "lambda_geo must be nonnegative, got {}",
                self.lambda_geo
            )));
        }
        if self.sinkhorn_iters == 0 {
            return Err(invalid("sinkhorn_iters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WarpEmbedding {
    pub warped: PointCloud,
    /// `[source features | positional encoding of warped points]`.
    pub embed: DMatrix<f64>,
    pub transform: RigidTransform,
    pub degenerate: bool,
}

/// Projects `et`, fits the rigid warp it implies, warps the source and
/// appends a positional encoding of the warped coordinates to its features.
pub fn match_to_warp_embed_3d(
    et: &MatchingMatrix,
    p: &PointCloud,
    q: &PointCloud,
    sinkhorn_iters: usize,
) -> Result<WarpEmbedding> {
    let feats = p.require_features()?;
    let projected = sinkhorn_project(et, sinkhorn_iters, DEFAULT_TEMPERATURE)?;
    let fit = soft_procrustes(&projected, p, q)?;
    let warped = apply_transform(&fit.transform, p);
    let enc = positional_encoding(
        &warped.coordinate_matrix(),
        DEFAULT_ENCODING_WIDTH,
        EncodingKind::Sinusoidal,
    )?;
    let d = feats.ncols();
    let embed = DMatrix::from_fn(p.len(), d + enc.ncols(), |i, c| {
        if c < d {
            feats[(i, c)]
        } else {
            enc[(i, c - d)]
        }
    });
    Ok(WarpEmbedding {
        warped,
        embed,
        transform: fit.transform,
        degenerate: fit.degenerate,
    })
}

/// `<f_i, g_j> / sqrt(d)` as raw logits.
pub fn matching_logits(fp: &DMatrix<f64>, fq: &DMatrix<f64>) -> Result<MatchingMatrix> {
    if fp.ncols() != fq.ncols() || fp.ncols() == 0 {
        return Err(invalid(format!(
            "feature widths differ or are empty: {} vs {}",
            fp.ncols(),
            fq.ncols()
        )));
    }
    let scale = (fp.ncols() as f64).sqrt();
    MatchingMatrix::logits(fp * fq.transpose() / scale)
}

/// Squared distances between two point sets.
pub fn squared_distances(p: &PointCloud, q: &PointCloud) -> DMatrix<f64> {
    DMatrix::from_fn(p.len(), q.len(), |i, j| (p.points()[i] - q.points()[j]).norm_squared())
}

/// The closed-form denoiser: feature logits over `tau_feat`, minus the
/// (optionally time-gated) squared distance after warping by the state.
#[derive(Clone, Copy, Debug, Default)]
pub struct GeometricDenoiser {
    pub config: DenoiserConfig,
}

impl GeometricDenoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn effective_lambda(&self, alpha_bar: f64) -> f64 {
        if self.config.time_gate {
            self.config.lambda_geo * alpha_bar
        } else {
            self.config.lambda_geo
        }
    }
}

impl Denoiser for GeometricDenoiser {
    fn denoise(&self, input: &DenoiserInput<'_>) -> Result<MatchingMatrix> {
        geometric_denoiser(input, &self.config)
    }
}

pub fn geometric_denoiser(input: &DenoiserInput<'_>, cfg: &DenoiserConfig) -> Result<MatchingMatrix> {
    cfg.validate()?;
    let (n, m) = (input.p.len(), input.q.len());
    if input.et.shape() != (n, m) {
        return Err(invalid(format!(
            "state {:?} does not match clouds of size {n} and {m}",
            input.et.shape()
        )));
    }
    let fp = input.p.require_features()?;
    let fq = input.q.require_features()?;
    let feat = matching_logits(fp, fq)?;
    let lambda = GeometricDenoiser { config: *cfg }.effective_lambda(input.alpha_bar);
    let mut logits = feat.into_entries() / cfg.tau_feat;
    if lambda > 0.0 {
        let warp = match_to_warp_embed_3d(input.et, input.p, input.q, cfg.sinkhorn_iters)?;
        if warp.degenerate {
            log::debug!("degenerate warp at t = {}", input.t);
        }
        logits -= squared_distances(&warp.warped, input.q) * lambda;
    }
    let logits = MatchingMatrix::logits(logits)?;
    match input.mode {
        DenoiseMode::Registration3d => sinkhorn_project(&logits, cfg.sinkhorn_iters, DEFAULT_TEMPERATURE),
        DenoiseMode::Image2d => softmax_project(&logits, DEFAULT_TEMPERATURE),
    }
}

/// Returns a fixed matrix at every step; used to check the sampler against
/// a perfect predictor.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub truth: MatchingMatrix,
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, input: &DenoiserInput<'_>) -> Result<MatchingMatrix> {
        if input.et.shape() != self.truth.shape() {
            return Err(invalid("oracle truth shape differs from the state"));
        }
        Ok(self.truth.clone())
    }
}

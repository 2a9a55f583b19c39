//! Reverse sampling over a strided timestep subsequence and correspondence
//! extraction from the final matrix.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoise::{DenoiseMode, Denoiser, DenoiserInput};
use crate::error::{invalid, Error, Result};
use crate::geometry::PointCloud;
use crate::matmath::{sinkhorn_project, softmax_project, MatchingMatrix, DEFAULT_SINKHORN_ITERS, DEFAULT_TEMPERATURE};
use crate::schedule::{ddim_step, DiffusionSchedule};

pub const DEFAULT_STEPS_3D: usize = 20;
pub const DEFAULT_STEPS_2D: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerInit {
    /// i.i.d. standard normal logits, then projected.
    #[default]
    WhiteNoise,
    /// All-zero logits, i.e. the uniform matrix after projection.
    Uniform,
    /// Caller-supplied starting state.
    Provided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma: f64,
    pub init: SamplerInit,
    pub seed: u64,
    pub mode: DenoiseMode,
    pub sinkhorn_iters: usize,
    pub keep_trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS_3D,
            sigma: 0.0,
            init: SamplerInit::WhiteNoise,
            seed: 0,
            mode: DenoiseMode::Registration3d,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            keep_trace: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleResult {
    pub e_final: MatchingMatrix,
    /// Initial state followed by the state after every update (`S + 1`
    /// matrices); empty unless `keep_trace` is set.
    pub trace: Vec<MatchingMatrix>,
}

fn project(state: &MatchingMatrix, mode: DenoiseMode, iters: usize) -> Result<MatchingMatrix> {
    match mode {
        DenoiseMode::Registration3d => sinkhorn_project(state, iters, DEFAULT_TEMPERATURE),
        DenoiseMode::Image2d => softmax_project(state, DEFAULT_TEMPERATURE),
    }
}

fn normal_matrix(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.sample(StandardNormal))
}

/// Runs the reverse chain from `t = T` down to 0 with `cfg.steps` denoiser
/// calls. The last update uses the terminal rule, so the result is the
/// final prediction of `E^0`.
pub fn reverse_sample(
    p: &PointCloud,
    q: &PointCloud,
    schedule: &DiffusionSchedule,
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    start: Option<&MatchingMatrix>,
) -> Result<SampleResult> {
    let (n, m) = (p.len(), q.len());
    if n == 0 || m == 0 {
        return Err(invalid("cannot sample over an empty cloud"));
    }
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(invalid(format!(
            "sigma must be finite and nonnegative, got {}",
            cfg.sigma
        )));
    }
    let timesteps = schedule.sampling_timesteps(cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = match (cfg.init, start) {
        (SamplerInit::Provided, Some(e)) => {
            if e.shape() != (n, m) {
                return Err(invalid("provided start state has the wrong shape"));
            }
            e.clone()
        }
        (SamplerInit::Provided, None) => {
            return Err(invalid("init = provided needs a start matrix"));
        }
        (SamplerInit::WhiteNoise, _) => MatchingMatrix::logits(normal_matrix(n, m, &mut rng))?,
        (SamplerInit::Uniform, _) => MatchingMatrix::logits(DMatrix::zeros(n, m))?,
    };
    let mut state = project(&initial, cfg.mode, cfg.sinkhorn_iters)?;
    let mut trace = Vec::new();
    if cfg.keep_trace {
        trace.push(state.clone());
    }

    let mut e_final = None;
    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let step_err = |source: Error| Error::SamplerStep {
            step: k,
            source: Box::new(source),
        };
        let input = DenoiserInput {
            et: &state,
            p,
            q,
            t,
            alpha_bar: schedule.alpha_bar(t),
            mode: cfg.mode,
        };
        let e0hat = denoiser.denoise(&input).map_err(step_err)?;
        if t_prev == 0 {
            if cfg.keep_trace {
                trace.push(e0hat.clone());
            }
            e_final = Some(e0hat);
            break;
        }
        let noise = (cfg.sigma > 0.0).then(|| normal_matrix(n, m, &mut rng));
        let next = ddim_step(&state, &e0hat, t, t_prev, cfg.sigma, schedule, noise.as_ref()).map_err(step_err)?;
        state = project(&next, cfg.mode, cfg.sinkhorn_iters).map_err(step_err)?;
        if cfg.keep_trace {
            trace.push(state.clone());
        }
    }
    let e_final = e_final.expect("timestep sequence always ends with a terminal step");
    Ok(SampleResult { e_final, trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ExtractMode {
    TopK { k: usize },
    MutualArgmax,
    Threshold { thresh: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub mode: ExtractMode,
    /// Set when a top-k request exceeded the number of entries.
    pub clipped: bool,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Orders by score descending, then row, then column.
fn by_score(a: &Correspondence, b: &Correspondence) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source.cmp(&b.source))
        .then(a.target.cmp(&b.target))
}

/// Pulls correspondences out of a matrix. The output is sorted by score
/// (descending) with ties broken by lower row, then lower column.
pub fn extract_correspondences(e: &MatchingMatrix, mode: ExtractMode) -> CorrespondenceSet {
    let w = e.entries();
    let (n, m) = w.shape();
    let all = || {
        (0..n).flat_map(move |i| {
            (0..m).map(move |j| Correspondence {
                source: i,
                target: j,
                score: w[(i, j)],
            })
        })
    };
    let mut clipped = false;
    let mut pairs: Vec<Correspondence> = match mode {
        ExtractMode::TopK { k } => {
            if k > n * m {
                log::warn!("top-k request {k} clipped to {}", n * m);
                clipped = true;
            }
            let mut v: Vec<_> = all().collect();
            v.sort_by(by_score);
            v.truncate(k.min(n * m));
            v
        }
        ExtractMode::Threshold { thresh } => all().filter(|c| c.score > thresh).collect(),
        ExtractMode::MutualArgmax => {
            let row_best = e.row_argmax();
            let col_best: Vec<usize> = (0..m)
                .map(|j| {
                    let col = w.column(j);
                    let mut best = 0;
                    for i in 1..n {
                        if col[i] > col[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect();
            row_best
                .iter()
                .enumerate()
                .filter(|&(i, &j)| col_best[j] == i)
                .map(|(i, &j)| Correspondence {
                    source: i,
                    target: j,
                    score: w[(i, j)],
                })
                .collect()
        }
    };
    pairs.sort_by(by_score);
    CorrespondenceSet { pairs, mode, clipped }
}

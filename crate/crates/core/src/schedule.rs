//! Noise schedule, forward noising, posterior and DDIM updates over
//! matching matrices, plus the training-objective diagnostics.
//!
//! Timesteps are 1-based: `t = 1..=T`. `alpha_bar(0)` is defined as 1 so the
//! terminal reverse step lands exactly on the predicted clean matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matmath::{MatchingMatrix, MatrixKind};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
/// Scale of the rigid-variant noise map.
pub const DEFAULT_ETA: f64 = 1.5;
/// Clamp inside log-likelihood diagnostics.
pub const LOG_EPS: f64 = 1e-12;

const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    LinearBeta,
    Cosine,
}

/// Per-timestep `alpha_t` and cumulative `alpha_bar_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    kind: ScheduleKind,
}

impl DiffusionSchedule {
    pub fn build(timesteps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::LinearBeta => (0..timesteps)
                .map(|i| {
                    if timesteps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / timesteps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=timesteps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max))
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            alphas,
            alpha_bars,
            kind,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.alphas.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_t` for `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(invalid(format!("timestep {t} beyond T = {}", self.timesteps())));
        }
        Ok(())
    }

    /// Evenly spaced descending subsequence of `steps` timesteps starting at
    /// `T`: `t_k = ceil(T (S - k) / S)`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.timesteps();
        if steps == 0 || steps > total {
            return Err(invalid(format!("need 1 <= steps <= {total}, got {steps}")));
        }
        Ok((0..steps).map(|k| (total * (steps - k)).div_ceil(steps)).collect())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::build(
            DEFAULT_TIMESTEPS,
            ScheduleKind::LinearBeta,
            DEFAULT_BETA_MIN,
            DEFAULT_BETA_MAX,
        )
        .expect("default schedule parameters are valid")
    }
}

/// Forward noise variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseVariant {
    #[default]
    Plain,
    /// Gaussian noise mapped through [`rigid_noise`].
    Rigid,
    Deformable,
}

/// `eta * (eps % 1) * sign(eps)`, where `%` keeps the sign of `eps`, so the
/// result is `eta * |frac(eps)|`. Zero maps to zero.
pub fn rigid_noise(eps: f64, eta: f64) -> f64 {
    if eps == 0.0 {
        return 0.0;
    }
    (eps % 1.0) * (eps.abs() / eps) * eta
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("{what}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Closed-form `q(E^t | E^0)` sample with caller-supplied standard normal
/// `noise`. The result is tagged as raw logits and is not projected.
pub fn forward_diffuse(
    e0: &MatchingMatrix,
    t: usize,
    noise: &DMatrix<f64>,
    variant: NoiseVariant,
    eta: f64,
    schedule: &DiffusionSchedule,
) -> Result<MatchingMatrix> {
    same_shape(e0.entries(), noise, "forward_diffuse noise")?;
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = match variant {
        NoiseVariant::Rigid => noise.map(|x| rigid_noise(x, eta)),
        NoiseVariant::Plain | NoiseVariant::Deformable => noise.clone(),
    };
    MatchingMatrix::logits(e0.entries() * signal + eps * spread)
}

/// Mean and (isotropic) variance of `q(E^{t-1} | E^t, E^0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: DMatrix<f64>,
    pub variance: f64,
}

pub fn posterior_mean_var(
    et: &MatchingMatrix,
    e0hat: &MatchingMatrix,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Posterior> {
    same_shape(et.entries(), e0hat.entries(), "posterior_mean_var")?;
    schedule.check_t(t)?;
    if t < 2 {
        return Err(invalid("posterior needs t >= 2; use the predicted E^0 at t = 1"));
    }
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let denom = 1.0 - ab;
    let coef_t = a.sqrt() * (1.0 - ab_prev) / denom;
    let coef_0 = ab_prev.sqrt() * (1.0 - a) / denom;
    Ok(Posterior {
        mean: et.entries() * coef_t + e0hat.entries() * coef_0,
        variance: (1.0 - a) * (1.0 - ab_prev) / denom,
    })
}

/// One DDIM update from `t` to `t_prev < t` given the predicted clean
/// matrix.
///
/// `sigma` scales the stochastic part relative to the DDPM posterior
/// standard deviation (0 is deterministic, 1 is ancestral sampling).
/// `noise` is only read when the effective standard deviation is positive.
/// Stepping to `t_prev = 0` returns `e0hat` unchanged.
pub fn ddim_step(
    et: &MatchingMatrix,
    e0hat: &MatchingMatrix,
    t: usize,
    t_prev: usize,
    sigma: f64,
    schedule: &DiffusionSchedule,
    noise: Option<&DMatrix<f64>>,
) -> Result<MatchingMatrix> {
    same_shape(et.entries(), e0hat.entries(), "ddim_step")?;
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(invalid(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be a finite nonnegative, got {sigma}")));
    }
    if t_prev == 0 {
        return Ok(e0hat.clone());
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let eps_hat = (et.entries() - e0hat.entries() * ab.sqrt()) / (1.0 - ab).sqrt();
    let std = sigma * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
    let dir = (1.0 - ab_prev - std * std).max(0.0).sqrt();
    let mut next = e0hat.entries() * ab_prev.sqrt() + eps_hat * dir;
    if std > 0.0 {
        let z = noise.ok_or_else(|| invalid("stochastic ddim_step needs a noise matrix"))?;
        same_shape(et.entries(), z, "ddim_step noise")?;
        next += z * std;
    }
    MatchingMatrix::new(next, MatrixKind::RawLogits)
}

/// `-sum_ij E0_ij ln(E0hat_ij + LOG_EPS)`.
pub fn simple_loss_eval(e0hat: &MatchingMatrix, e0: &MatchingMatrix) -> f64 {
    e0.entries()
        .iter()
        .zip(e0hat.entries().iter())
        .map(|(&truth, &pred)| -truth * (pred.max(0.0) + LOG_EPS).ln())
        .sum()
}

/// KL between the true posterior and the model posterior built from
/// `e0hat`. Both share `Sigma_q(t)`, so this is
/// `||mu_q - mu_theta||_F^2 / (2 Sigma_q(t))`.
pub fn elbo_kl_term(
    et: &MatchingMatrix,
    e0hat: &MatchingMatrix,
    e0: &MatchingMatrix,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    let truth = posterior_mean_var(et, e0, t, schedule)?;
    let model = posterior_mean_var(et, e0hat, t, schedule)?;
    Ok((truth.mean - model.mean).norm_squared() / (2.0 * truth.variance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use twofloat::TwoFloat;

    fn normal(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.sample(StandardNormal))
    }

    fn perm(n: usize, rng: &mut ChaCha8Rng) -> MatchingMatrix {
        use rand::seq::SliceRandom;
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        let pairs: Vec<_> = p.into_iter().enumerate().collect();
        MatchingMatrix::from_pairs(n, n, &pairs).unwrap()
    }

    #[test]
    fn linear_schedule_reaches_low_signal() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.timesteps(), 1000);
        assert!(s.alpha_bar(1000) < 0.01);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn alpha_bars_are_products() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = DiffusionSchedule::build(1000, kind, 1e-4, 0.999).unwrap();
            for t in [1, 2, 10, 500, 1000] {
                let direct: f64 = s.alphas()[..t].iter().product();
                assert!((direct - s.alpha_bar(t)).abs() <= 1e-12 * direct);
            }
            assert!(s.alphas().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::build(1, ScheduleKind::LinearBeta, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        assert_eq!(s.sampling_timesteps(1).unwrap(), vec![1]);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(DiffusionSchedule::build(0, ScheduleKind::LinearBeta, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::build(10, ScheduleKind::LinearBeta, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::build(10, ScheduleKind::LinearBeta, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::build(10, ScheduleKind::Cosine, 0.1, 1.0).is_err());
    }

    #[test]
    fn sampling_timesteps_are_even_and_distinct() {
        let s = DiffusionSchedule::default();
        let ts = s.sampling_timesteps(20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[19], 50);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 50));
        let all = s.sampling_timesteps(1000).unwrap();
        assert_eq!(all, (1..=1000).rev().collect::<Vec<_>>());
        assert!(s.sampling_timesteps(0).is_err());
        assert!(s.sampling_timesteps(1001).is_err());
        let odd = s.sampling_timesteps(7).unwrap();
        assert!(odd.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn rigid_noise_negative_fraction() {
        assert!((rigid_noise(-1.75, 1.5) - 1.125).abs() < 1e-15);
        assert_eq!(rigid_noise(0.0, 1.5), 0.0);
        assert!((rigid_noise(2.25, 1.5) - 0.375).abs() < 1e-15);
        assert!(rigid_noise(-0.3, DEFAULT_ETA) >= 0.0);
    }

    #[test]
    fn forward_zero_time_is_identity() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e0 = perm(4, &mut rng);
        let noise = normal(4, 4, &mut rng);
        let et = forward_diffuse(&e0, 0, &noise, NoiseVariant::Rigid, DEFAULT_ETA, &s).unwrap();
        assert_eq!(et.entries(), e0.entries());
    }

    #[test]
    fn forward_deformable_without_noise() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e0 = perm(5, &mut rng);
        let et = forward_diffuse(&e0, 300, &DMatrix::zeros(5, 5), NoiseVariant::Deformable, 1.5, &s).unwrap();
        let expected = e0.entries() * s.alpha_bar(300).sqrt();
        assert_eq!(et.entries(), &expected);
        assert_eq!(et.kind(), MatrixKind::RawLogits);
    }

    #[test]
    fn forward_rigid_applies_map() {
        let s = DiffusionSchedule::default();
        let e0 = MatchingMatrix::logits(DMatrix::zeros(1, 1)).unwrap();
        let noise = DMatrix::from_element(1, 1, -1.75);
        let et = forward_diffuse(&e0, 10, &noise, NoiseVariant::Rigid, 1.5, &s).unwrap();
        let expected = (1.0 - s.alpha_bar(10)).sqrt() * 1.125;
        assert!((et.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let s = DiffusionSchedule::default();
        let e0 = MatchingMatrix::logits(DMatrix::zeros(2, 3)).unwrap();
        assert!(forward_diffuse(&e0, 1, &DMatrix::zeros(3, 2), NoiseVariant::Plain, 1.5, &s).is_err());
    }

    #[test]
    fn plain_forward_inverts() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 17, 250, 999, 1000] {
            let e0 = MatchingMatrix::logits(normal(6, 4, &mut rng)).unwrap();
            let noise = normal(6, 4, &mut rng);
            let et = forward_diffuse(&e0, t, &noise, NoiseVariant::Plain, 1.5, &s).unwrap();
            let ab = s.alpha_bar(t);
            let back = (et.entries() - noise * (1.0 - ab).sqrt()) / ab.sqrt();
            assert!((back - e0.entries()).amax() < 1e-10, "t = {t}");
        }
    }

    #[test]
    fn posterior_limits() {
        let s = DiffusionSchedule::build(1000, ScheduleKind::LinearBeta, 1e-12, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let et = MatchingMatrix::logits(normal(3, 3, &mut rng)).unwrap();
        let post = posterior_mean_var(&et, &et, 2, &s).unwrap();
        assert!((post.mean - et.entries()).amax() < 1e-6);
        assert!(post.variance < 1e-11);
    }

    #[test]
    fn posterior_rejects_first_step() {
        let s = DiffusionSchedule::default();
        let m = MatchingMatrix::logits(DMatrix::zeros(2, 2)).unwrap();
        assert!(posterior_mean_var(&m, &m, 1, &s).is_err());
    }

    #[test]
    fn posterior_matches_double_double_oracle() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in [2, 10, 400, 1000] {
            let et = MatchingMatrix::logits(normal(4, 4, &mut rng)).unwrap();
            let e0 = MatchingMatrix::logits(normal(4, 4, &mut rng)).unwrap();
            let post = posterior_mean_var(&et, &e0, t, &s).unwrap();
            // Recompute every alpha from the betas in double-double arithmetic.
            let betas: Vec<TwoFloat> = (0..t)
                .map(|i| {
                    TwoFloat::from(1e-4)
                        + (TwoFloat::from(0.02) - TwoFloat::from(1e-4)) * TwoFloat::from(i as f64)
                            / TwoFloat::from(999.0)
                })
                .collect();
            let one = TwoFloat::from(1.0);
            let ab_prev = betas[..t - 1].iter().fold(one, |acc, b| acc * (one - *b));
            let alpha = one - betas[t - 1];
            let ab = ab_prev * alpha;
            for i in 0..4 {
                for j in 0..4 {
                    let num = alpha.sqrt() * (one - ab_prev) * TwoFloat::from(et.get(i, j))
                        + ab_prev.sqrt() * (one - alpha) * TwoFloat::from(e0.get(i, j));
                    let expected: f64 = (num / (one - ab)).into();
                    assert!((post.mean[(i, j)] - expected).abs() < 1e-12);
                }
            }
            let var: f64 = ((one - alpha) * (one - ab_prev) / (one - ab)).into();
            assert!((post.variance - var).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_variance_bounds() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = DiffusionSchedule::build(1000, kind, 1e-4, 0.5).unwrap();
            let m = MatchingMatrix::logits(DMatrix::zeros(1, 1)).unwrap();
            for t in 2..=1000 {
                let v = posterior_mean_var(&m, &m, t, &s).unwrap().variance;
                assert!(v > 0.0 && v <= 1.0 - s.alpha(t) + 1e-15, "t = {t}");
            }
        }
    }

    #[test]
    fn ddim_deterministic_and_terminal() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let et = MatchingMatrix::logits(normal(5, 5, &mut rng)).unwrap();
        let e0 = perm(5, &mut rng);
        let a = ddim_step(&et, &e0, 500, 450, 0.0, &s, None).unwrap();
        let b = ddim_step(&et, &e0, 500, 450, 0.0, &s, None).unwrap();
        assert_eq!(a, b);
        let last = ddim_step(&et, &e0, 50, 0, 0.0, &s, None).unwrap();
        assert_eq!(last, e0);
        let last_noisy = ddim_step(&et, &e0, 50, 0, 1.0, &s, None).unwrap();
        assert_eq!(last_noisy, e0);
        assert!(ddim_step(&et, &e0, 50, 50, 0.0, &s, None).is_err());
        assert!(ddim_step(&et, &e0, 50, 10, 1.0, &s, None).is_err());
    }

    #[test]
    fn ddim_stochastic_reduces_to_posterior_mean_for_unit_sigma() {
        // With sigma = 1 and zero noise, one-step DDIM equals the DDPM posterior mean.
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let et = MatchingMatrix::logits(normal(3, 4, &mut rng)).unwrap();
        let e0 = MatchingMatrix::logits(normal(3, 4, &mut rng)).unwrap();
        let zero = DMatrix::zeros(3, 4);
        let step = ddim_step(&et, &e0, 300, 299, 1.0, &s, Some(&zero)).unwrap();
        let post = posterior_mean_var(&et, &e0, 300, &s).unwrap();
        assert!((step.entries() - post.mean).amax() < 1e-10);
    }

    #[test]
    fn ddim_oracle_trajectory_converges() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let e0 = perm(6, &mut rng);
            let mut x = MatchingMatrix::logits(normal(6, 6, &mut rng)).unwrap();
            let ts = s.sampling_timesteps(1000).unwrap();
            for (k, &t) in ts.iter().enumerate() {
                let t_prev = ts.get(k + 1).copied().unwrap_or(0);
                x = ddim_step(&x, &e0, t, t_prev, 0.0, &s, None).unwrap();
            }
            assert!((x.entries() - e0.entries()).amax() < 1e-6);
        }
    }

    #[test]
    fn simple_loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e0 = perm(7, &mut rng);
        assert!(simple_loss_eval(&e0, &e0).abs() < 1e-9);
        let uniform = MatchingMatrix::weights(DMatrix::from_element(7, 7, 1.0 / 7.0)).unwrap();
        assert!((simple_loss_eval(&uniform, &e0) - 7.0 * 7f64.ln()).abs() < 1e-9);
        let miss = MatchingMatrix::weights(DMatrix::from_element(7, 7, 0.0)).unwrap();
        let l = simple_loss_eval(&miss, &e0);
        assert!(l.is_finite() && (l - 7.0 * -(LOG_EPS.ln())).abs() < 1e-6);
    }

    #[test]
    fn kl_term_properties() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let et = MatchingMatrix::logits(normal(3, 3, &mut rng)).unwrap();
        let e0 = perm(3, &mut rng);
        assert_eq!(elbo_kl_term(&et, &e0, &e0, 100, &s).unwrap(), 0.0);

        let delta = normal(3, 3, &mut rng) * 0.1;
        let hat1 = MatchingMatrix::logits(e0.entries() + &delta).unwrap();
        let hat2 = MatchingMatrix::logits(e0.entries() + &delta * 2.0).unwrap();
        let k1 = elbo_kl_term(&et, &hat1, &e0, 100, &s).unwrap();
        let k2 = elbo_kl_term(&et, &hat2, &e0, 100, &s).unwrap();
        assert!((k2 / k1 - 4.0).abs() < 1e-9);

        // Independent Gaussian KL for equal isotropic covariances:
        // sum over entries of (mu_q - mu_p)^2 / (2 var).
        let t = 100;
        let (a, ab, abp) = (s.alpha(t), s.alpha_bar(t), s.alpha_bar(t - 1));
        let var = (1.0 - a) * (1.0 - abp) / (1.0 - ab);
        let mut brute = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let diff = abp.sqrt() * (1.0 - a) / (1.0 - ab) * (e0.get(i, j) - hat1.get(i, j));
                brute += diff * diff / (2.0 * var);
            }
        }
        assert!((k1 - brute).abs() < 1e-10 * brute.max(1.0));
    }

    proptest! {
        #[test]
        fn cross_entropy_minimized_at_truth(
            seed in 0u64..10_000,
            n in 2usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e0 = perm(n, &mut rng);
            let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
            let hat = crate::matmath::softmax_project(
                &MatchingMatrix::weights(raw).unwrap(), 1.0).unwrap();
            prop_assert!(simple_loss_eval(&hat, &e0) >= simple_loss_eval(&e0, &e0));
        }
    }
}

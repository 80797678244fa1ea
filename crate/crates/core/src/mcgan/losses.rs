//! Adversarial and reconstruction loss algebra.
//!
//! Functions return the scalar loss; the `*_grad` variants also return the
//! gradient with respect to the scores they consume, which is what the
//! training loop backpropagates.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Weight of the ℓ1 reconstruction term in the with-ℓ1 objective.
pub const L1_WEIGHT: f64 = 100.0;

/// Default gradient-penalty weight.
pub const DEFAULT_GP_LAMBDA: f64 = 10.0;

fn non_empty(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty batch")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what}: non-finite score")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `½ · mean((s − target)²)` and its gradient.
pub fn least_squares_grad(scores: &[f64], target: f64) -> Result<(f64, Vec<f64>)> {
    non_empty(scores, "least-squares loss")?;
    let n = scores.len() as f64;
    let value = 0.5 * scores.iter().map(|s| (s - target).powi(2)).sum::<f64>() / n;
    let grad = scores.iter().map(|s| (s - target) / n).collect();
    Ok((value, grad))
}

/// Context-discriminator loss: `½·mean((D(real) − 1)²) + ½·mean(D(fake)²)`.
pub fn lsgan_d_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(least_squares_grad(d_real, 1.0)?.0 + least_squares_grad(d_fake, 0.0)?.0)
}

/// Generator side of the least-squares game: `½·mean((D(fake) − 1)²)`.
pub fn lsgan_g_loss(d_fake: &[f64]) -> Result<f64> {
    Ok(least_squares_grad(d_fake, 1.0)?.0)
}

/// Discriminator loss with gradients; `flipped` swaps the real/fake targets.
pub fn lsgan_d_loss_grad(d_real: &[f64], d_fake: &[f64], flipped: bool) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (t_real, t_fake) = if flipped { (0.0, 1.0) } else { (1.0, 0.0) };
    let (lr, gr) = least_squares_grad(d_real, t_real)?;
    let (lf, gf) = least_squares_grad(d_fake, t_fake)?;
    Ok((lr + lf, gr, gf))
}

/// Something that scores flat inputs and reports its input gradient.
pub trait Critic {
    fn score(&self, x: &[f64]) -> f64;
    fn input_gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Affine critic `w·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Critic for LinearCritic {
    fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    fn input_gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.weights.clone()
    }
}

/// `λ · mean((‖∇critic(x̂ₙ)‖₂ − 1)²)` with `x̂ₙ = εₙ·realₙ + (1 − εₙ)·fakeₙ`.
pub fn gradient_penalty<C: Critic + ?Sized>(
    critic: &C,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    epsilons: &[f64],
    lambda: f64,
) -> Result<f64> {
    check_batches(real, fake, lambda)?;
    if epsilons.len() != real.len() {
        return Err(Error::InvalidArgument("one interpolation weight per sample required".into()));
    }
    let mut acc = 0.0;
    for ((r, f), &eps) in real.iter().zip(fake).zip(epsilons) {
        let x_hat = interpolate(r, f, eps);
        let norm = critic.input_gradient(&x_hat).iter().map(|g| g * g).sum::<f64>().sqrt();
        acc += (norm - 1.0).powi(2);
    }
    Ok(lambda * acc / real.len() as f64)
}

pub fn interpolate(real: &[f64], fake: &[f64], eps: f64) -> Vec<f64> {
    real.iter().zip(fake).map(|(r, f)| eps * r + (1.0 - eps) * f).collect()
}

/// Per-sample interpolation weights `ε ~ U[0, 1]` drawn from `seed`.
pub fn draw_epsilons(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn check_batches(real: &[Vec<f64>], fake: &[Vec<f64>], lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("gradient-penalty weight must be >= 0, got {lambda}")));
    }
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::InvalidArgument(format!(
            "real/fake batch sizes must match and be non-zero ({} vs {})",
            real.len(),
            fake.len()
        )));
    }
    Ok(())
}

/// Critic loss: `mean(critic(fake)) − mean(critic(real)) + gradient penalty`.
pub fn wgan_gp_d_loss<C: Critic + ?Sized>(
    critic: &C,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    check_batches(real, fake, lambda)?;
    let s_real: Vec<f64> = real.iter().map(|x| critic.score(x)).collect();
    let s_fake: Vec<f64> = fake.iter().map(|x| critic.score(x)).collect();
    let eps = draw_epsilons(real.len(), seed);
    Ok(mean(&s_fake) - mean(&s_real) + gradient_penalty(critic, real, fake, &eps, lambda)?)
}

/// Generator side of the Wasserstein game: `−mean(critic(fake))`.
pub fn wgan_g_loss(critic_fake: &[f64]) -> Result<f64> {
    non_empty(critic_fake, "wasserstein generator loss")?;
    Ok(-mean(critic_fake))
}

/// Wasserstein critic terms (without the penalty) and their score gradients;
/// `flipped` exchanges which batch is treated as real.
pub fn wgan_d_terms_grad(s_real: &[f64], s_fake: &[f64], flipped: bool) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    non_empty(s_real, "wasserstein critic loss")?;
    non_empty(s_fake, "wasserstein critic loss")?;
    let sign = if flipped { -1.0 } else { 1.0 };
    let value = sign * (mean(s_fake) - mean(s_real));
    let gr = vec![-sign / s_real.len() as f64; s_real.len()];
    let gf = vec![sign / s_fake.len() as f64; s_fake.len()];
    Ok((value, gr, gf))
}

/// Mean absolute voxel difference.
pub fn l1_term(fake: &[f64], real: &[f64]) -> Result<f64> {
    Ok(l1_term_grad(fake, real)?.0)
}

/// ℓ1 term and its gradient with respect to `fake`.
pub fn l1_term_grad(fake: &[f64], real: &[f64]) -> Result<(f64, Vec<f64>)> {
    if fake.len() != real.len() {
        return Err(Error::InvalidArgument(format!(
            "l1 term: shape mismatch ({} vs {} voxels)",
            fake.len(),
            real.len()
        )));
    }
    if fake.is_empty() {
        return Err(Error::InvalidArgument("l1 term: empty input".into()));
    }
    let n = fake.len() as f64;
    let value = fake.iter().zip(real).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let grad = fake
        .iter()
        .zip(real)
        .map(|(a, b)| {
            if a > b {
                1.0 / n
            } else if a < b {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, grad))
}

/// Which generator objective to optimise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Least-squares + Wasserstein adversarial terms.
    NoL1,
    /// Adds `100 · ℓ1` reconstruction.
    WithL1,
}

impl ObjectiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveMode::NoL1 => "no_l1",
            ObjectiveMode::WithL1 => "with_l1",
        }
    }

    pub fn l1_weight(self) -> f64 {
        match self {
            ObjectiveMode::NoL1 => 0.0,
            ObjectiveMode::WithL1 => L1_WEIGHT,
        }
    }
}

impl std::str::FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_l1" => Ok(Self::NoL1),
            "with_l1" => Ok(Self::WithL1),
            other => Err(Error::InvalidArgument(format!("unknown objective mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Component losses computed on one batch.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratorLossParts {
    pub lsgan_g: f64,
    pub wgan_g: f64,
    pub l1: f64,
}

pub fn generator_objective(mode: ObjectiveMode, parts: GeneratorLossParts) -> f64 {
    let adversarial = parts.lsgan_g + parts.wgan_g;
    match mode {
        ObjectiveMode::NoL1 => adversarial,
        ObjectiveMode::WithL1 => adversarial + L1_WEIGHT * parts.l1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lsgan_examples() {
        assert_eq!(lsgan_d_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(lsgan_d_loss(&[0.5], &[0.5]).unwrap(), 0.25);
        assert_eq!(lsgan_g_loss(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!(lsgan_d_loss(&[], &[0.0]).is_err());
        assert!(lsgan_g_loss(&[]).is_err());
    }

    #[test]
    fn flipped_targets_swap_roles() {
        let (a, ..) = lsgan_d_loss_grad(&[0.2, 0.9], &[0.4, 0.1], true).unwrap();
        let b = lsgan_d_loss(&[0.4, 0.1], &[0.2, 0.9]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty() {
        let w = vec![0.6, 0.8];
        let c = LinearCritic { weights: w, bias: 0.3 };
        let real = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let fake = vec![vec![0.0, 0.0], vec![3.0, 3.0]];
        let gp = gradient_penalty(&c, &real, &fake, &[0.3, 0.9], 10.0).unwrap();
        assert!(gp.abs() < 1e-15);
    }

    #[test]
    fn slope_two_critic_penalty_is_lambda() {
        let c = LinearCritic { weights: vec![2.0], bias: 0.0 };
        let gp = gradient_penalty(&c, &[vec![0.7]], &[vec![-0.2]], &[0.5], 10.0).unwrap();
        assert_eq!(gp, 10.0);
        // the full d-loss adds mean(fake) - mean(real)
        let d = wgan_gp_d_loss(&c, &[vec![1.0]], &[vec![0.0]], 10.0, 1).unwrap();
        assert!((d - (0.0 - 2.0 + 10.0)).abs() < 1e-12);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let c = LinearCritic { weights: vec![1.0], bias: 0.0 };
        assert!(matches!(
            wgan_gp_d_loss(&c, &[vec![1.0]], &[vec![0.0]], -1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn l1_examples() {
        let a = vec![0.1, -0.3, 0.7];
        assert_eq!(l1_term(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        assert!((l1_term(&b, &a).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(l1_term(&a, &b).unwrap(), l1_term(&b, &a).unwrap());
        assert!(l1_term(&a, &a[..2]).is_err());
    }

    #[test]
    fn objective_examples() {
        let parts = GeneratorLossParts { lsgan_g: 0.5, wgan_g: -1.0, l1: 0.02 };
        assert!((generator_objective(ObjectiveMode::WithL1, parts) - 1.5).abs() < 1e-12);
        let zero_l1 = GeneratorLossParts { l1: 0.0, ..parts };
        assert_eq!(
            generator_objective(ObjectiveMode::WithL1, zero_l1),
            generator_objective(ObjectiveMode::NoL1, zero_l1)
        );
        let doubled = GeneratorLossParts { l1: 0.04, ..parts };
        let delta = generator_objective(ObjectiveMode::WithL1, doubled) - generator_objective(ObjectiveMode::WithL1, parts);
        assert!((delta - 100.0 * 0.02).abs() < 1e-12);
    }
}

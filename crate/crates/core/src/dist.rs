//! Posterior heads over Q-values.
//!
//! A head is a `(mu, raw_scale)` pair emitted by the network. The scale is made
//! positive with softplus and read as a Gaussian standard deviation during
//! fine-tuning or a Cauchy scale during pre-training. Samples are drawn by
//! reparameterization so that gradients flow from a sampled Q back into the
//! head outputs.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Which posterior family is in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Cauchy posterior, heavy tails.
    PreTrain,
    /// Gaussian posterior.
    FineTune,
}

impl Stage {
    /// Episode `e` (1-based) is pre-training iff `e <= omega`.
    pub fn for_episode(episode: usize, omega: usize) -> Self {
        if episode <= omega {
            Stage::PreTrain
        } else {
            Stage::FineTune
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PreTrain => "pretrain",
            Stage::FineTune => "finetune",
        }
    }

    /// Draw the parameter-free noise for this family: standard normal for
    /// fine-tuning, uniform on the open interval (0, 1) for pre-training.
    pub fn draw_noise<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Stage::FineTune => rng.sample(StandardNormal),
            Stage::PreTrain => loop {
                let u: f64 = rng.gen();
                if u > 0.0 && u < 1.0 {
                    break u;
                }
            },
        }
    }

    /// `dq/dscale` for a given noise draw.
    pub fn noise_factor(self, noise: f64) -> Result<f64> {
        match self {
            Stage::FineTune => Ok(noise),
            Stage::PreTrain => {
                if !(noise > 0.0 && noise < 1.0) {
                    return Err(Error::DegenerateNoise(noise));
                }
                Ok((PI * (noise - 0.5)).tan())
            }
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Stage::PreTrain),
            "finetune" => Ok(Stage::FineTune),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`. Floored at the smallest positive
/// normal double so the scale never underflows to zero.
pub fn positive_transform(raw: f64) -> f64 {
    let v = if raw > 0.0 {
        raw + (-raw).exp().ln_1p()
    } else {
        raw.exp().ln_1p()
    };
    v.max(f64::MIN_POSITIVE)
}

/// Derivative of softplus, the logistic sigmoid.
pub fn positive_transform_grad(raw: f64) -> f64 {
    if raw >= 0.0 {
        1.0 / (1.0 + (-raw).exp())
    } else {
        let e = raw.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorParams {
    pub mu: f64,
    pub raw_scale: f64,
    pub scale: f64,
}

impl PosteriorParams {
    pub fn from_raw(mu: f64, raw_scale: f64) -> Self {
        Self {
            mu,
            raw_scale,
            scale: positive_transform(raw_scale),
        }
    }
}

/// Reparameterized sample: `mu + scale * eps` (Gaussian) or
/// `mu + scale * tan(pi (u - 1/2))` (Cauchy inverse CDF).
pub fn sample(params: &PosteriorParams, stage: Stage, noise: f64) -> Result<f64> {
    Ok(params.mu + params.scale * stage.noise_factor(noise)?)
}

/// Differential entropy of the head's distribution.
pub fn entropy(params: &PosteriorParams, stage: Stage) -> f64 {
    entropy_of_scale(params.scale, stage)
}

pub fn entropy_of_scale(scale: f64, stage: Stage) -> f64 {
    match stage {
        Stage::FineTune => 0.5 * (2.0 * PI * E).ln() + scale.ln(),
        Stage::PreTrain => (4.0 * PI).ln() + scale.ln(),
    }
}

/// Loss and gradient of one reparameterized sample with respect to the head outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLoss {
    pub loss: f64,
    pub d_mu: f64,
    pub d_raw_scale: f64,
}

/// Per-sample surrogate `1/2 (q - d)^2 - c * H[q]` and its exact gradients through
/// the reparameterization. `target` is treated as a constant.
pub fn head_loss_grad(
    params: &PosteriorParams,
    q_sample: f64,
    noise: f64,
    target: f64,
    stage: Stage,
    entropy_coef: f64,
) -> Result<HeadLoss> {
    let factor = stage.noise_factor(noise)?;
    let err = q_sample - target;
    let loss = 0.5 * err * err - entropy_coef * entropy(params, stage);
    // dH/dscale is 1/scale for both families.
    let d_scale = err * factor - entropy_coef / params.scale;
    Ok(HeadLoss {
        loss,
        d_mu: err,
        d_raw_scale: d_scale * positive_transform_grad(params.raw_scale),
    })
}

/// CDF of the head's distribution at `x`.
pub fn cdf(params: &PosteriorParams, stage: Stage, x: f64) -> f64 {
    let z = (x - params.mu) / params.scale;
    match stage {
        Stage::PreTrain => 0.5 + z.atan() / PI,
        Stage::FineTune => 0.5 * erfc(-z / std::f64::consts::SQRT_2),
    }
}

/// Complementary error function (Numerical Recipes `erfcc`, |rel err| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

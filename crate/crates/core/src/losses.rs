//! Heatmap MSE, feature-level perceptual loss and the weighted total
//! `λ(α(L_HG1 + L_HG2) + (1 − α)·L_percep)`.

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::graph::{Graph, Tape, Var};
use crate::hourglass::NetworkOutput;
use crate::tensor::Real;

fn default_lambda() -> f64 {
    2.0
}

fn default_alpha() -> f64 {
    0.7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight of the prediction losses; the perceptual term gets `1 − α`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub use_perceptual: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            alpha: default_alpha(),
            use_perceptual: false,
        }
    }
}

impl LossConfig {
    pub fn perceptual() -> Self {
        Self {
            use_perceptual: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(HgError::config(format!("loss.lambda must be positive, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(HgError::config(format!("loss.alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    fn check_stacks(&self, stacks: usize) -> Result<()> {
        if self.use_perceptual && stacks != 2 {
            return Err(HgError::config(format!(
                "perceptual loss needs exactly 2 stacks, network has {stacks}"
            )));
        }
        Ok(())
    }

    /// Weights `(per-stack, perceptual)` multiplying each term of the total.
    pub fn weights(&self) -> (f64, f64) {
        if self.use_perceptual {
            (self.lambda * self.alpha, self.lambda * (1.0 - self.alpha))
        } else {
            (1.0, 0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_stack_mse: Vec<f64>,
    pub l_percep: f64,
    pub total: f64,
}

/// The total loss evaluated on plain numbers.
pub fn combine(cfg: &LossConfig, per_stack_mse: &[f64], l_percep: f64) -> Result<f64> {
    cfg.validate()?;
    cfg.check_stacks(per_stack_mse.len())?;
    let sum: f64 = per_stack_mse.iter().sum();
    if cfg.use_perceptual {
        Ok(cfg.lambda * (cfg.alpha * sum + (1.0 - cfg.alpha) * l_percep))
    } else {
        Ok(sum)
    }
}

pub fn heatmap_mse<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    tape.mse(pred, target)
}

/// Feature-level MSE; gradients reach both feature maps.
pub fn perceptual_loss<T: Real>(tape: &mut Tape<T>, feat_a: Var, feat_b: Var) -> Result<Var> {
    tape.mse(feat_a, feat_b)
}

/// Builds the training objective on the tape. Every stack's heatmaps are
/// compared against the same `target`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &NetworkOutput<Var>,
    target: Var,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    cfg.check_stacks(out.heatmaps.len())?;
    let mut terms = Vec::with_capacity(out.heatmaps.len());
    for h in &out.heatmaps {
        terms.push(heatmap_mse(tape, *h, target)?);
    }
    let per_stack_mse: Vec<f64> = terms.iter().map(|v| tape.value(*v).item().as_f64()).collect();
    let mut sum = terms[0];
    for t in &terms[1..] {
        sum = tape.add(sum, *t)?;
    }
    let (total, l_percep) = if cfg.use_perceptual {
        let p = perceptual_loss(tape, out.tail_features[0], out.tail_features[1])?;
        let lp = tape.value(p).item().as_f64();
        let a = tape.scale(sum, T::of(cfg.alpha));
        let b = tape.scale(p, T::of(1.0 - cfg.alpha));
        let ab = tape.add(a, b)?;
        (tape.scale(ab, T::of(cfg.lambda)), lp)
    } else {
        (sum, 0.0)
    };
    let breakdown = LossBreakdown {
        per_stack_mse,
        l_percep,
        total: tape.value(total).item().as_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_cases() {
        let c = LossConfig {
            lambda: 2.0,
            alpha: 0.7,
            use_perceptual: true,
        };
        assert!((combine(&c, &[1.0, 1.0], 0.5).unwrap() - 3.1).abs() < 1e-12);
        let c1 = LossConfig {
            lambda: 1.0,
            alpha: 1.0,
            use_perceptual: true,
        };
        assert_eq!(combine(&c1, &[0.25, 0.5], 123.0).unwrap(), 0.75);
        let c0 = LossConfig {
            lambda: 2.0,
            alpha: 0.0,
            use_perceptual: true,
        };
        assert_eq!(combine(&c0, &[7.0, 9.0], 0.5).unwrap(), 1.0);
        assert_eq!(combine(&LossConfig::default(), &[1.0, 2.0, 3.0], 9.0).unwrap(), 6.0);
    }

    #[test]
    fn perceptual_needs_two_stacks() {
        let c = LossConfig::perceptual();
        assert!(matches!(combine(&c, &[1.0], 0.0), Err(HgError::Config(_))));
        assert!(matches!(combine(&c, &[1.0; 3], 0.0), Err(HgError::Config(_))));
    }

    #[test]
    fn invalid_weights() {
        let mut c = LossConfig::perceptual();
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        c.alpha = 0.5;
        c.lambda = 0.0;
        assert!(c.validate().is_err());
    }
}

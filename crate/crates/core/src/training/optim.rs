use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{ParamSet, Tag};
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptMode {
    /// Heavy-ball SGD with a fixed learning rate.
    Momentum,
    /// Plain SGD with step size `c / t`.
    Theory,
}

impl std::str::FromStr for OptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "momentum" => Ok(OptMode::Momentum),
            "theory" => Ok(OptMode::Theory),
            other => Err(Error::Data(format!("unknown optimizer mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub mode: OptMode,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Step scale of theory mode.
    pub c: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            mode: OptMode::Momentum,
            learning_rate: 0.01,
            momentum: 0.9,
            c: 0.01,
            max_epochs: 40,
            patience: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Range(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Range(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.c > 0.0) {
            return Err(Error::Range(format!("c must be > 0, got {}", self.c)));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Range(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Range("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// Step size used at update `t` (1-based).
    pub fn step_size(&self, t: usize) -> Result<f64> {
        match self.mode {
            OptMode::Momentum => Ok(self.learning_rate),
            OptMode::Theory if t >= 1 => Ok(self.c / t as f64),
            OptMode::Theory => Err(Error::Range("theory-mode step index must be >= 1".into())),
        }
    }
}

/// Velocity buffers, one per parameter, created lazily.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    velocity: Vec<TensorF>,
}

/// Applies one update from the accumulated gradients, then zeroes them.
///
/// Theory mode: `w -= (c / t) g`. Momentum mode: `v = mu v + g; w -= lr v`.
/// Parameters tagged `frozen` are left untouched.
pub fn sgd_step(
    params: &mut ParamSet,
    state: &mut OptState,
    t: usize,
    cfg: &OptConfig,
    frozen: Option<Tag>,
) -> Result<()> {
    let step = cfg.step_size(t)?;
    if state.velocity.len() != params.len() {
        state.velocity = params.iter().map(|p| TensorF::zeros(p.value.shape())).collect();
    }
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        if Some(p.tag) != frozen {
            match cfg.mode {
                OptMode::Theory => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= step * g;
                    }
                }
                OptMode::Momentum => {
                    for ((w, g), m) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                        *m = cfg.momentum * *m + g;
                        *w -= step * *m;
                    }
                }
            }
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

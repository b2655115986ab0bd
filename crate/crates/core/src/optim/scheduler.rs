use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 15,
            min_lr: 1e-5,
        }
    }
}

/// Multiplies the rate by `factor` after `patience` consecutive epochs
/// without strict improvement, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: u32,
}

impl Plateau {
    pub fn new(cfg: &PlateauConfig, lr: f64) -> Self {
        Plateau {
            cfg: cfg.clone(),
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("scheduler received non-finite loss {loss}")));
        }
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.bad_epochs = 0;
            }
        }
        Ok(self.lr)
    }
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub patience: u32,
    pub best: f64,
    pub bad_epochs: u32,
}

impl EarlyStop {
    pub fn new(patience: u32) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }
}

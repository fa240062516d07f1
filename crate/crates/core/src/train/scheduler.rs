use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Absolute improvement needed to reset the patience counter.
    pub threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 5,
            min_lr: 0.0,
            threshold: 1e-4,
        }
    }
}

impl SchedulerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.factor > 0.0 && self.factor < 1.0) {
            p.push(format!("scheduler.factor must be in (0, 1), got {}", self.factor));
        }
        if !(self.min_lr >= 0.0) {
            p.push(format!("scheduler.min_lr must be non-negative, got {}", self.min_lr));
        }
        if !(self.threshold >= 0.0) {
            p.push(format!("scheduler.threshold must be non-negative, got {}", self.threshold));
        }
        p
    }
}

/// Reduce-on-plateau for a maximized metric, no cooldown.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    cfg: SchedulerConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, cfg: SchedulerConfig) -> Result<Self> {
        let p = cfg.problems();
        if !p.is_empty() {
            return Err(Error::InvalidConfig(p));
        }
        Ok(PlateauScheduler {
            cfg,
            lr: lr0,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's metric and return the learning rate for the next.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric > self.best + self.cfg.threshold {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.cfg.patience {
            self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

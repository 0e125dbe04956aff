use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    /// Multiply by `factor` once `patience` consecutive epochs fail to
    /// improve on the best validation loss.
    PlateauDecay { factor: f64, patience: u32 },
    /// Multiply by `rate` at the end of every epoch.
    ExponentialDecay { rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    kind: ScheduleKind,
    lr: f64,
    best: f64,
    stale_epochs: u32,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, initial_lr: f64) -> Self {
        assert!(initial_lr > 0.0, "learning rate must be positive");
        Self { kind, lr: initial_lr, best: f64::INFINITY, stale_epochs: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn best_validation(&self) -> f64 {
        self.best
    }

    /// Advances one epoch and returns the learning rate for the next one.
    pub fn epoch_end(&mut self, validation_loss: f64) -> f64 {
        match self.kind {
            ScheduleKind::ExponentialDecay { rate } => self.lr *= rate,
            ScheduleKind::PlateauDecay { factor, patience } => {
                if validation_loss < self.best {
                    self.best = validation_loss;
                    self.stale_epochs = 0;
                } else {
                    self.stale_epochs += 1;
                    if self.stale_epochs >= patience {
                        self.lr *= factor;
                        self.stale_epochs = 0;
                    }
                }
            }
        }
        // Keep the rate strictly positive even after many decays.
        self.lr = self.lr.max(f64::MIN_POSITIVE);
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_one_epoch() {
        let mut s = LrSchedule::new(ScheduleKind::ExponentialDecay { rate: 0.95 }, 0.002);
        assert!((s.epoch_end(f64::NAN) - 0.0019).abs() < 1e-15);
    }

    #[test]
    fn plateau_untouched_while_improving() {
        let mut s = LrSchedule::new(ScheduleKind::PlateauDecay { factor: 0.9, patience: 10 }, 0.001);
        for e in 0..100 {
            s.epoch_end(100.0 - e as f64);
        }
        assert_eq!(s.lr(), 0.001);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut s = LrSchedule::new(ScheduleKind::PlateauDecay { factor: 0.9, patience: 10 }, 0.001);
        s.epoch_end(1.0);
        for _ in 0..9 {
            s.epoch_end(1.0);
        }
        assert_eq!(s.lr(), 0.001);
        s.epoch_end(1.0);
        assert!((s.lr() - 0.001 * 0.9).abs() < 1e-18);
        // Counter reset: nine more stale epochs do not decay again.
        for _ in 0..9 {
            s.epoch_end(1.0);
        }
        assert!((s.lr() - 0.001 * 0.9).abs() < 1e-18);
    }
}

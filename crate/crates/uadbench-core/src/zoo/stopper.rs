//! Early stopping on the validation reconstruction loss, shared by every
//! variant: stop once the loss has failed to improve on the best value by
//! more than `epsilon` for `patience` consecutive epochs.

/// Verdict after observing one validation epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Streaming form of the criterion. Feeding it the recorded history epoch
/// by epoch reproduces exactly what [`replay_stop_epoch`] computes — the
/// training loop has no side channel into the decision.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    epsilon: f64,
    best: f64,
    best_epoch: usize,
    since_improve: usize,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, epsilon: f64) -> EarlyStopper {
        assert!(patience > 0, "patience must be positive");
        assert!(epsilon >= 0.0, "epsilon must be non-negative");
        EarlyStopper {
            patience,
            epsilon,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improve: 0,
            epoch: 0,
        }
    }

    /// Observe one epoch's validation loss (epochs are 1-based).
    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        if val_loss < self.best - self.epsilon {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        if self.since_improve >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// 1-based epoch holding the best loss seen so far (0 before any).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn epochs_seen(&self) -> usize {
        self.epoch
    }
}

/// Pure replay of the criterion over a complete history: the 1-based epoch
/// at which training stops, or `history.len()` if it never triggers.
pub fn replay_stop_epoch(history: &[f64], patience: usize, epsilon: f64) -> usize {
    let mut best = f64::INFINITY;
    let mut since_improve = 0usize;
    for (i, &val) in history.iter().enumerate() {
        if val < best - epsilon {
            best = val;
            since_improve = 0;
        } else {
            since_improve += 1;
        }
        if since_improve >= patience {
            return i + 1;
        }
    }
    history.len()
}

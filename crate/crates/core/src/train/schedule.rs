/// Patience-based decay on a validation score.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr: f64,
    pub decay_factor: f64,
    pub patience_first: usize,
    pub patience_after: usize,
    pub best: Option<f64>,
    /// Epochs since the last improvement or decay.
    pub stale: usize,
    pub decays: usize,
}

impl LrSchedule {
    pub fn new(lr0: f64, decay_factor: f64, patience_first: usize, patience_after: usize) -> Self {
        LrSchedule {
            lr0,
            lr: lr0,
            decay_factor,
            patience_first,
            patience_after,
            best: None,
            stale: 0,
            decays: 0,
        }
    }

    /// Records one epoch's score; returns true when it is a new best.
    /// Improvement means strictly greater than the best so far. Patience
    /// only starts counting at the first positive score: a run whose dev
    /// output has no matching n-grams yet is not stalled.
    pub fn observe(&mut self, score: f64) -> bool {
        let improved = match self.best {
            None if score <= 0.0 => return false,
            None => true,
            Some(b) => score > b,
        };
        if improved {
            self.best = Some(score);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let patience = if self.decays == 0 {
            self.patience_first
        } else {
            self.patience_after
        };
        if self.stale >= patience {
            self.lr *= self.decay_factor;
            self.decays += 1;
            self.stale = 0;
        }
        improved
    }
}

/// Learning rate after replaying a score history from scratch.
pub fn lr_schedule_step(history: &[f64], schedule: &LrSchedule) -> f64 {
    let mut s = LrSchedule::new(
        schedule.lr0,
        schedule.decay_factor,
        schedule.patience_first,
        schedule.patience_after,
    );
    for &h in history {
        s.observe(h);
    }
    s.lr
}

//! Validation-driven learning-rate plateau schedule and early stopping.

/// Counts epochs since the monitored value last improved by more than `min_delta`.
#[derive(Debug, Clone)]
pub struct Patience {
    best: f64,
    wait: usize,
    min_delta: f64,
}

impl Patience {
    pub fn new(min_delta: f64) -> Self {
        Self {
            best: f64::INFINITY,
            wait: 0,
            min_delta,
        }
    }

    /// Records one epoch's value; returns the number of epochs without improvement.
    pub fn observe(&mut self, value: f64) -> usize {
        if value < self.best - self.min_delta {
            self.best = value;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait
    }

    pub fn reset_wait(&mut self) {
        self.wait = 0;
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without improvement,
/// then starts counting again.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    factor: f64,
    patience: usize,
    monitor: Patience,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            monitor: Patience::new(min_delta),
        }
    }

    /// Feeds a validation loss; returns the rate for the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if self.monitor.observe(val_loss) >= self.patience {
            self.lr *= self.factor;
            self.monitor.reset_wait();
        }
        self.lr
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    monitor: Patience,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            monitor: Patience::new(min_delta),
        }
    }

    /// True once `patience` consecutive epochs brought no improvement.
    pub fn should_stop(&mut self, val_loss: f64) -> bool {
        self.monitor.observe(val_loss) >= self.patience
    }
}

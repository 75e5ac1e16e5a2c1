/// Divides the learning rate by `1 / factor` once the monitored loss has not
/// improved by `min_delta` for more than `patience` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    bad_epochs: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Feeds one epoch's loss; returns the learning rate to use next.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            self.reductions += 1;
            return lr * self.factor;
        }
        lr
    }
}

/// Outcome of feeding one epoch to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive epochs without a `min_delta` improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, loss: f64) -> StopDecision {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.since_best = 0;
            return StopDecision {
                improved: true,
                stop: false,
            };
        }
        self.since_best += 1;
        StopDecision {
            improved: false,
            stop: self.since_best >= self.patience,
        }
    }
}

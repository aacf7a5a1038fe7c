/// Tracks validation loss and signals when `patience` consecutive epochs
/// have failed to improve on the best value seen so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// This epoch is the new best; checkpoint it.
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records the validation loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        match self.best {
            Some((_, b)) if !(val_loss < b) => {
                self.since_best += 1;
                if self.patience > 0 && self.since_best >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.since_best = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

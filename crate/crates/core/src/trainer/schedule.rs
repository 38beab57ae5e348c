//! Reduce-on-plateau learning-rate policy with exponential decay steps.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr0: f64,
    pub alpha: f64,
    pub patience: usize,
    pub min_delta: f64,
    /// Best metric seen so far (lower is better).
    pub best: Option<f64>,
    /// Evaluations since the last improvement or decay.
    pub counter: usize,
    /// Decay events so far.
    pub decays: u32,
}

impl Plateau {
    pub fn new(lr0: f64, alpha: f64, patience: usize, min_delta: f64) -> Self {
        Plateau { lr0, alpha, patience, min_delta, best: None, counter: 0, decays: 0 }
    }

    /// `lr0 * e^(-alpha * decays)`
    pub fn lr(&self) -> f64 {
        self.lr0 * (-self.alpha * self.decays as f64).exp()
    }

    /// Feeds one validation value; returns `true` when the rate was decayed.
    pub fn update(&mut self, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric < b - self.min_delta) {
            self.best = Some(metric);
            self.counter = 0;
            return false;
        }
        self.counter += 1;
        if self.counter >= self.patience {
            self.decays += 1;
            self.counter = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_decay() {
        let mut p = Plateau::new(1e-4, 0.1, 3, 1e-4);
        for m in [1.0, 1.0, 1.0, 1.0] {
            p.update(m);
        }
        assert_eq!(p.decays, 1);
        assert!((p.lr() - 9.0484e-5).abs() < 1e-9);
    }

    #[test]
    fn improving_metric_keeps_rate() {
        let mut p = Plateau::new(1e-3, 0.1, 1, 1e-4);
        for i in 0..50 {
            assert!(!p.update(10.0 - i as f64 * 0.01));
        }
        assert_eq!(p.lr(), 1e-3);
    }

    #[test]
    fn small_gains_do_not_count() {
        let mut p = Plateau::new(1e-4, 0.1, 2, 1e-2);
        p.update(1.0);
        p.update(0.995);
        assert!(p.update(0.991));
        assert_eq!(p.best, Some(1.0));
    }

    #[test]
    fn rate_follows_closed_form() {
        let mut p = Plateau::new(2e-4, 0.25, 2, 0.0);
        let mut stepwise = 2e-4f64;
        p.update(1.0);
        for _ in 0..20 {
            if p.update(1.0) {
                stepwise *= (-0.25f64).exp();
            }
            let k = p.decays as f64;
            assert!(((p.lr() - 2e-4 * (-0.25 * k).exp()) / p.lr()).abs() < 1e-15);
            assert!(((p.lr() - stepwise) / p.lr()).abs() < 1e-12);
        }
    }
}

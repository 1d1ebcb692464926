//! Stagnation-driven control of mutation rounds per generation (T) and
//! offspring per individual (N).

use serde::{Deserialize, Serialize};

use crate::genome::Fitness;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Initial and reset value of T.
    pub lambda_t: u32,
    pub xi_t: u32,
    /// Initial value of N.
    pub lambda_n: u32,
    pub xi_n: u32,
    /// N stops growing once it exceeds this ceiling.
    pub tau_n: u32,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig { lambda_t: 1, xi_t: 1, lambda_n: 1, xi_n: 1, tau_n: 10 }
    }
}

impl AdaptationConfig {
    pub fn is_valid(&self) -> bool {
        self.lambda_t >= 1 && self.xi_t >= 1 && self.lambda_n >= 1 && self.xi_n >= 1 && self.tau_n >= 1
    }

    pub fn initial_state(&self) -> AdaptationState {
        AdaptationState { tpg: self.lambda_t, npi: self.lambda_n, generation: 0, best_prev: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationState {
    /// Mutation rounds for the current generation.
    pub tpg: u32,
    /// Offspring per individual for the current generation.
    pub npi: u32,
    pub generation: u32,
    /// Best incomplete fitness seen at the previous step.
    pub best_prev: Option<Fitness>,
}

impl AdaptationState {
    /// Advances one generation given this generation's best fitness.
    ///
    /// Both updates read the pre-step T and N.
    pub fn step(&self, best_now: Fitness, config: &AdaptationConfig) -> AdaptationState {
        let (t, n) = (self.tpg, self.npi);
        let (tpg, npi) = if self.generation == 0 {
            (config.lambda_t, config.lambda_n)
        } else {
            let npi = if t > n && n <= config.tau_n { n + config.xi_n } else { n };
            let improved = self.best_prev.is_some_and(|prev| best_now > prev);
            let tpg = if improved || t > n { config.lambda_t } else { t + config.xi_t };
            (tpg, npi)
        };
        AdaptationState { tpg, npi, generation: self.generation + 1, best_prev: Some(best_now) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_uses_initial_values() {
        let cfg = AdaptationConfig { lambda_t: 2, xi_t: 1, lambda_n: 3, xi_n: 1, tau_n: 10 };
        let s = AdaptationState { tpg: 7, npi: 9, generation: 0, best_prev: None };
        let next = s.step(Fitness::new(1.0), &cfg);
        assert_eq!((next.tpg, next.npi), (2, 3));
    }

    #[test]
    fn improvement_resets_t() {
        let cfg = AdaptationConfig::default();
        let s = AdaptationState { tpg: 3, npi: 5, generation: 4, best_prev: Some(Fitness::new(0.1)) };
        let next = s.step(Fitness::new(0.2), &cfg);
        assert_eq!((next.tpg, next.npi), (1, 5));
    }

    #[test]
    fn stagnation_trace() {
        let cfg = AdaptationConfig::default();
        let mut s = cfg.initial_state();
        let mut trace = alloc::vec![(s.tpg, s.npi)];
        s = s.step(Fitness::new(0.0), &cfg);
        for _ in 0..5 {
            s = s.step(Fitness::new(0.0), &cfg);
            trace.push((s.tpg, s.npi));
        }
        assert_eq!(trace, [(1, 1), (2, 1), (1, 2), (2, 2), (3, 2), (1, 3)]);
    }

    #[test]
    fn n_is_capped() {
        let cfg = AdaptationConfig { tau_n: 2, ..Default::default() };
        let mut s = cfg.initial_state().step(Fitness::new(0.0), &cfg);
        for _ in 0..100 {
            s = s.step(Fitness::new(0.0), &cfg);
            assert!(s.npi <= cfg.tau_n + cfg.xi_n);
        }
        assert_eq!(s.npi, 3);
    }
}

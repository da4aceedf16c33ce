//! Two-parameter sigmoid policy and its score function.
//!
//! `π(a⁰|s; θ) = σ(f(s)·θ₀ + θ₁)` with the state index as the feature `f(s)`;
//! the second action takes the complement.

use nalgebra::{Matrix2, Vector2};

use crate::mdp::{MdpModel, N_ACTIONS};

/// Clamp applied to probabilities before taking logarithms.
const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyParams {
    pub theta: Vector2<f64>,
}

impl PolicyParams {
    pub fn new(theta0: f64, theta1: f64) -> Self {
        Self {
            theta: Vector2::new(theta0, theta1),
        }
    }

    pub fn from_vector(theta: Vector2<f64>) -> Self {
        Self { theta }
    }

    /// Feature vector `[f(s), 1]`.
    pub fn features(s: usize) -> Vector2<f64> {
        Vector2::new(s as f64, 1.0)
    }

    /// Probabilities of both actions at state `s`.
    pub fn probs_at(&self, s: usize) -> [f64; N_ACTIONS] {
        let x = Self::features(s).dot(&self.theta);
        [sigmoid(x), sigmoid(-x)]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs_at(s)[a]
    }

    /// `log π(a|s; θ)` with the probability clamped away from 0 and 1.
    pub fn log_prob(&self, s: usize, a: usize) -> f64 {
        self.prob(s, a).clamp(LOG_CLAMP, 1.0 - LOG_CLAMP).ln()
    }

    /// `∇_θ log π(a|s; θ)`.
    pub fn score(&self, s: usize, a: usize) -> Vector2<f64> {
        let [p0, p1] = self.probs_at(s);
        let f = Self::features(s);
        match a {
            0 => f * p1,
            _ => f * -p0,
        }
    }

    /// Action Fisher `Σ_a π(a|s) ∇log π ∇log πᵀ`, which for this family is
    /// `π(1−π) [f,1][f,1]ᵀ`.
    pub fn action_fisher(&self, s: usize) -> Matrix2<f64> {
        let [p0, p1] = self.probs_at(s);
        let f = Self::features(s);
        f * f.transpose() * (p0 * p1)
    }

    /// Tabulates the policy over every state of `mdp`.
    pub fn tabular(&self, mdp: &MdpModel) -> TabularPolicy {
        self.tabular_n(mdp.n_states())
    }

    pub fn tabular_n(&self, n_states: usize) -> TabularPolicy {
        TabularPolicy {
            probs: (0..n_states).map(|s| self.probs_at(s)).collect(),
        }
    }
}

/// Tabulates `params` on `mdp`.
pub fn action_probabilities(params: &PolicyParams, mdp: &MdpModel) -> TabularPolicy {
    params.tabular(mdp)
}

pub fn score(params: &PolicyParams, s: usize, a: usize) -> Vector2<f64> {
    params.score(s, a)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-state action distributions `π(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub probs: Vec<[f64; N_ACTIONS]>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize) -> Self {
        Self {
            probs: vec![[0.5, 0.5]; n_states],
        }
    }

    /// Deterministic policy choosing `actions[s]` at each state.
    pub fn deterministic(actions: &[usize]) -> Self {
        Self {
            probs: actions
                .iter()
                .map(|&a| {
                    let mut row = [0.0; N_ACTIONS];
                    row[a] = 1.0;
                    row
                })
                .collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::new(0.0, 0.0).tabular_n(4);
        for row in &p.probs {
            assert_eq!(row, &[0.5, 0.5]);
        }
    }

    #[test]
    fn saturated_params() {
        let p = PolicyParams::new(0.0, 20.0).tabular_n(5);
        for row in &p.probs {
            assert_abs_diff_eq!(row[0], 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn sigmoid_of_one() {
        let p = PolicyParams::new(1.0, 0.0);
        assert_abs_diff_eq!(p.prob(1, 0), 1.0 / (1.0 + (-1.0f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(p.prob(1, 0), 0.731058, epsilon = 1e-6);
    }

    #[test]
    fn score_at_origin() {
        let p = PolicyParams::new(0.0, 0.0);
        assert_abs_diff_eq!(p.score(0, 0), Vector2::new(0.0, 0.5), epsilon = 1e-15);
        let mean = p.score(0, 0) * p.prob(0, 0) + p.score(0, 1) * p.prob(0, 1);
        assert_abs_diff_eq!(mean, Vector2::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn action_fisher_matches_definition() {
        let p = PolicyParams::new(0.3, -1.2);
        for s in 0..4 {
            let direct: Matrix2<f64> = (0..2)
                .map(|a| p.score(s, a) * p.score(s, a).transpose() * p.prob(s, a))
                .sum();
            assert_abs_diff_eq!(p.action_fisher(s), direct, epsilon = 1e-14);
        }
    }

    #[test]
    fn log_prob_is_clamped() {
        let p = PolicyParams::new(0.0, 100.0);
        assert!(p.log_prob(0, 1).is_finite());
        assert_abs_diff_eq!(p.log_prob(0, 1), LOG_CLAMP.ln(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn score_has_zero_mean(t0 in -8.0..8.0f64, t1 in -8.0..8.0f64, s in 0usize..7) {
            let p = PolicyParams::new(t0, t1);
            let mean = p.score(s, 0) * p.prob(s, 0) + p.score(s, 1) * p.prob(s, 1);
            prop_assert!(mean.amax() < 1e-12);
        }

        #[test]
        fn score_matches_finite_differences(
            t0 in -3.0..3.0f64, t1 in -3.0..3.0f64, s in 0usize..5, a in 0usize..2
        ) {
            let p = PolicyParams::new(t0, t1);
            let h = 1e-6;
            for k in 0..2 {
                let mut plus = p;
                let mut minus = p;
                plus.theta[k] += h;
                minus.theta[k] -= h;
                let fd = (plus.log_prob(s, a) - minus.log_prob(s, a)) / (2.0 * h);
                prop_assert!((fd - p.score(s, a)[k]).abs() < 1e-6);
            }
        }
    }
}

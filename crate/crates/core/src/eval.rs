//! Exact policy evaluation: gain, bias, bias Q-values, (n=1)-discount values
//! and discounted values.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{self, ChainAnalysis, MdpModel, N_ACTIONS};
use crate::policy::{PolicyParams, TabularPolicy};

/// Every optimality quantity of one stationary policy.
#[derive(Debug, Clone)]
pub struct EvalBundle {
    /// `v_g`, constant over states.
    pub gain: f64,
    /// `v_b = D r_π`.
    pub bias: DVector<f64>,
    /// `q_b(s,a) = r(s,a) − v_g + Σ p(s'|s,a) v_b(s')`, shape `n × 2`.
    pub q_b: DMatrix<f64>,
    /// `v₁ = −D² r_π`.
    pub v1: DVector<f64>,
    /// `q₁(s,a) = −v_b(s) + Σ p(s'|s,a) v₁(s')`, shape `n × 2`.
    pub q1: DMatrix<f64>,
    pub chain: ChainAnalysis,
}

pub fn evaluate(mdp: &MdpModel, policy: &TabularPolicy) -> Result<EvalBundle> {
    let chain = mdp::induced_chain(mdp, policy)?;
    Ok(evaluate_chain(mdp, chain))
}

/// Evaluation given an already analysed chain.
pub fn evaluate_chain(mdp: &MdpModel, chain: ChainAnalysis) -> EvalBundle {
    let gain = chain.gain();
    let bias = &chain.deviation * &chain.r_pi;
    let next_bias = mdp.expected_next(&bias);
    let q_b = DMatrix::from_fn(mdp.n_states(), N_ACTIONS, |s, a| {
        mdp.reward(s, a) - gain + next_bias[(s, a)]
    });
    let v1 = -(&chain.deviation * &bias);
    let next_v1 = mdp.expected_next(&v1);
    let q1 = DMatrix::from_fn(mdp.n_states(), N_ACTIONS, |s, a| -bias[s] + next_v1[(s, a)]);
    EvalBundle {
        gain,
        bias,
        q_b,
        v1,
        q1,
        chain,
    }
}

/// Gain and the bias at `s0` only, skipping the mixing-time scan; used for
/// cheap objective probes.
pub fn gain_and_bias(mdp: &MdpModel, policy: &TabularPolicy, s0: usize) -> Result<(f64, f64)> {
    let n = mdp.n_states();
    if policy.n_states() != n {
        return Err(Error::DimensionMismatch {
            policy: policy.n_states(),
            mdp: n,
        });
    }
    let (p, r_pi) = mdp::policy_matrices(mdp, policy);
    let p_star = mdp::stationary_distribution(&p)?;
    let gain = p_star.dot(&r_pi);
    // (I − P + P*) v_b = r_π − g 1
    let mut a = DMatrix::<f64>::identity(n, n) - &p;
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] += p_star[j];
        }
    }
    let bias = a
        .lu()
        .solve(&r_pi.add_scalar(-gain))
        .ok_or(Error::NonUnichain("I - P + P* is singular"))?;
    Ok((gain, bias[s0]))
}

/// A parameterised policy together with its tabulation and exact evaluation.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub params: PolicyParams,
    pub policy: TabularPolicy,
    pub eval: EvalBundle,
}

impl PolicySnapshot {
    pub fn new(mdp: &MdpModel, params: PolicyParams) -> Result<Self> {
        let policy = params.tabular(mdp);
        let eval = evaluate(mdp, &policy)?;
        Ok(Self {
            params,
            policy,
            eval,
        })
    }

    pub fn chain(&self) -> &ChainAnalysis {
        &self.eval.chain
    }

    pub fn gain(&self) -> f64 {
        self.eval.gain
    }

    pub fn bias_at(&self, s0: usize) -> f64 {
        self.eval.bias[s0]
    }
}

/// Discounted values of a policy.
#[derive(Debug, Clone)]
pub struct DiscountedValues {
    pub v: DVector<f64>,
    pub q: DMatrix<f64>,
    /// `(1 − γ) v_γ`.
    pub scaled_v: DVector<f64>,
    /// `(I − γP)⁻¹`; row `s0` is the improper discounted state distribution.
    pub resolvent: DMatrix<f64>,
}

pub fn discounted_value(
    mdp: &MdpModel,
    policy: &TabularPolicy,
    gamma: f64,
) -> Result<DiscountedValues> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidDiscount(gamma));
    }
    let n = mdp.n_states();
    if policy.n_states() != n {
        return Err(Error::DimensionMismatch {
            policy: policy.n_states(),
            mdp: n,
        });
    }
    let (p, r_pi) = mdp::policy_matrices(mdp, policy);
    let resolvent = (DMatrix::<f64>::identity(n, n) - p * gamma)
        .try_inverse()
        .ok_or(Error::InvalidDiscount(gamma))?;
    let v = &resolvent * r_pi;
    let next = mdp.expected_next(&v);
    let q = DMatrix::from_fn(n, N_ACTIONS, |s, a| mdp.reward(s, a) + gamma * next[(s, a)]);
    let scaled_v = &v * (1.0 - gamma);
    Ok(DiscountedValues {
        v,
        q,
        scaled_v,
        resolvent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use approx::assert_abs_diff_eq;

    fn a1() -> MdpModel {
        envs::builtin("env_a1").unwrap().mdp
    }

    /// Truncated-series oracle `Σ_{t<T} (Pᵗ r − v_g 1)`.
    fn bias_by_series(chain: &ChainAnalysis, horizon: usize) -> DVector<f64> {
        let n = chain.n_states();
        let gain = chain.gain();
        let mut acc = DVector::zeros(n);
        let mut pt_r = chain.r_pi.clone();
        for _ in 0..horizon {
            acc += pt_r.add_scalar(-gain);
            pt_r = &chain.p * pt_r;
        }
        acc
    }

    #[test]
    fn env_a1_deterministic_values() {
        let mdp = a1();
        let a01 = evaluate(&mdp, &TabularPolicy::deterministic(&[1, 0])).unwrap();
        assert_abs_diff_eq!(a01.gain, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a01.bias[0], 11.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a01.q_b[(0, 0)], 11.5, epsilon = 1e-9);
        assert_abs_diff_eq!(a01.v1[0], -11.0, epsilon = 1e-9);

        let a00 = evaluate(&mdp, &TabularPolicy::deterministic(&[0, 0])).unwrap();
        assert_abs_diff_eq!(a00.gain, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a00.bias[0], 12.0, epsilon = 1e-9);

        // brute-force series cross-check
        let series = bias_by_series(&a01.chain, a01.chain.t_mix + 200);
        assert_abs_diff_eq!(series, a01.bias, epsilon = 1e-9);
    }

    #[test]
    fn bundle_invariants_on_builtins() {
        for name in envs::BUILTIN_NAMES {
            let mdp = envs::builtin(name).unwrap().mdp;
            for (t0, t1) in [(0.0, 0.0), (0.7, -1.3), (-2.0, 2.5)] {
                let snap = PolicySnapshot::new(&mdp, PolicyParams::new(t0, t1)).unwrap();
                let e = &snap.eval;
                let chain = &e.chain;
                for s in 0..mdp.n_states() {
                    let vb: f64 = (0..2).map(|a| snap.policy.prob(s, a) * e.q_b[(s, a)]).sum();
                    let v1: f64 = (0..2).map(|a| snap.policy.prob(s, a) * e.q1[(s, a)]).sum();
                    assert_abs_diff_eq!(vb, e.bias[s], epsilon = 1e-9);
                    assert_abs_diff_eq!(v1, e.v1[s], epsilon = 1e-9);
                }
                assert_abs_diff_eq!(chain.p_star.dot(&e.bias), 0.0, epsilon = 1e-8);
                // Bellman consistency of the bias
                let lhs = e.bias.add_scalar(e.gain);
                let rhs = &chain.r_pi + &chain.p * &e.bias;
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8);
                // gain two ways
                let via_matrix = (&chain.p_star_matrix * &chain.r_pi)[mdp.initial_state()];
                assert_abs_diff_eq!(via_matrix, e.gain, epsilon = 1e-10);
                // series oracle for the bias
                let series = bias_by_series(chain, chain.t_mix + 200);
                assert_abs_diff_eq!(series, e.bias, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn v1_solves_its_own_poisson_equation() {
        // Independent route: (I − P) v₁ = −v_b with p*·v₁ = 0, solved by
        // replacing one equation with the normalisation.
        let mdp = envs::builtin("env_b1").unwrap().mdp;
        let snap = PolicySnapshot::new(&mdp, PolicyParams::new(0.4, -0.9)).unwrap();
        let chain = snap.chain();
        let n = chain.n_states();
        let mut a = DMatrix::<f64>::identity(n, n) - &chain.p;
        let mut b = -snap.eval.bias.clone();
        for j in 0..n {
            a[(n - 1, j)] = chain.p_star[j];
        }
        b[n - 1] = 0.0;
        let v1 = a.lu().solve(&b).unwrap();
        assert_abs_diff_eq!(v1, snap.eval.v1, epsilon = 1e-9);
        // q₁ via −D² r at state-action level
        let d2r = &chain.deviation * &chain.deviation * &chain.r_pi;
        let next = mdp.expected_next(&(-d2r));
        for s in 0..n {
            for act in 0..2 {
                assert_abs_diff_eq!(
                    snap.eval.q1[(s, act)],
                    -snap.eval.bias[s] + next[(s, act)],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn cheap_evaluation_agrees() {
        for name in envs::BUILTIN_NAMES {
            let mdp = envs::builtin(name).unwrap().mdp;
            let policy = PolicyParams::new(0.6, -0.8).tabular(&mdp);
            let full = evaluate(&mdp, &policy).unwrap();
            let (g, b) = gain_and_bias(&mdp, &policy, 0).unwrap();
            assert_abs_diff_eq!(g, full.gain, epsilon = 1e-10);
            assert_abs_diff_eq!(b, full.bias[0], epsilon = 1e-8);
        }
    }

    #[test]
    fn discounted_examples() {
        let single = MdpModel::new(&[vec![vec![1.0], vec![1.0]]], &[vec![3.0, 3.0]], 0).unwrap();
        let d = discounted_value(&single, &TabularPolicy::uniform(1), 0.9).unwrap();
        assert_abs_diff_eq!(d.v[0], 30.0, epsilon = 1e-9);

        let mdp = a1();
        let policy = PolicyParams::new(0.5, 0.5).tabular(&mdp);
        let d0 = discounted_value(&mdp, &policy, 0.0).unwrap();
        let chain = mdp::induced_chain(&mdp, &policy).unwrap();
        assert_abs_diff_eq!(d0.v, chain.r_pi, epsilon = 1e-15);

        let a00 = TabularPolicy::deterministic(&[0, 0]);
        let near_one = discounted_value(&mdp, &a00, 0.99999).unwrap();
        assert!((near_one.scaled_v[0] + 1.0).abs() < 1e-3);

        assert!(matches!(
            discounted_value(&mdp, &a00, 1.0),
            Err(Error::InvalidDiscount(_))
        ));
    }

    #[test]
    fn scaled_discounted_value_approaches_gain_on_builtins() {
        for name in envs::BUILTIN_NAMES {
            let mdp = envs::builtin(name).unwrap().mdp;
            let policy = PolicyParams::new(0.3, -0.2).tabular(&mdp);
            let e = evaluate(&mdp, &policy).unwrap();
            let d = discounted_value(&mdp, &policy, 0.99999).unwrap();
            for s in 0..mdp.n_states() {
                assert!((d.scaled_v[s] - e.gain).abs() <= 1e-3, "{name} state {s}");
            }
        }
    }
}

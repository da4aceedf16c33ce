//! Finite MDP model and the Markov-chain algebra of the chain a stationary
//! policy induces on it: transition matrix, stationary distribution, limiting
//! matrix, deviation matrix and mixing time.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

/// Every state exposes exactly this many actions.
pub const N_ACTIONS: usize = 2;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Hard cap on the number of steps searched for the mixing time.
pub const MIXING_CAP: usize = 10_000;

/// Finite tabular MDP with two actions per state and a deterministic
/// initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    n_states: usize,
    /// One `n × n` row-stochastic matrix per action: `transition[a][(s, s')] = p(s'|s,a)`.
    transition: [DMatrix<f64>; N_ACTIONS],
    /// `reward[(s, a)] = r(s, a)`, the expected immediate reward.
    reward: DMatrix<f64>,
    initial_state: usize,
}

impl MdpModel {
    /// Builds a model from nested `transitions[s][a][s']` and `rewards[s][a]`.
    pub fn new(
        transitions: &[Vec<Vec<f64>>],
        rewards: &[Vec<f64>],
        initial_state: usize,
    ) -> Result<Self> {
        let n = transitions.len();
        if n == 0 {
            return Err(Error::InvalidMdp("no states".into()));
        }
        if rewards.len() != n {
            return Err(Error::InvalidMdp(format!(
                "{} reward rows for {} states",
                rewards.len(),
                n
            )));
        }
        if initial_state >= n {
            return Err(Error::StateOutOfRange(initial_state));
        }
        let mut transition = [DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
        let mut reward = DMatrix::zeros(n, N_ACTIONS);
        for s in 0..n {
            if transitions[s].len() != N_ACTIONS || rewards[s].len() != N_ACTIONS {
                return Err(Error::InvalidMdp(format!(
                    "state {s} must have exactly {N_ACTIONS} actions"
                )));
            }
            for a in 0..N_ACTIONS {
                let row = &transitions[s][a];
                if row.len() != n {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s}, {a}) has length {}, expected {n}",
                        row.len()
                    )));
                }
                for (next, &p) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::ProbabilityOutOfRange {
                            state: s,
                            action: a,
                            next,
                            value: p,
                        });
                    }
                    transition[a][(s, next)] = p;
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::NotStochastic {
                        state: s,
                        action: a,
                        sum,
                    });
                }
                let r = rewards[s][a];
                if !r.is_finite() {
                    return Err(Error::InvalidMdp(format!("reward ({s}, {a}) is not finite")));
                }
                reward[(s, a)] = r;
            }
        }
        Ok(Self {
            n_states: n,
            transition,
            reward,
            initial_state,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[a][(s, next)]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[(s, a)]
    }

    /// Transition matrix of action `a` (rows indexed by the current state).
    pub fn action_matrix(&self, a: usize) -> &DMatrix<f64> {
        &self.transition[a]
    }

    /// `transitions[s][a][s']` as nested vectors.
    pub fn transitions_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_states)
            .map(|s| {
                (0..N_ACTIONS)
                    .map(|a| self.transition[a].row(s).iter().copied().collect())
                    .collect()
            })
            .collect()
    }

    /// `rewards[s][a]` as nested vectors.
    pub fn rewards_nested(&self) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| (0..N_ACTIONS).map(|a| self.reward[(s, a)]).collect())
            .collect()
    }

    /// Expected next-state values `Σ_{s'} p(s'|s,a) v(s')` for every `(s, a)`.
    pub fn expected_next(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_states, N_ACTIONS);
        for a in 0..N_ACTIONS {
            out.set_column(a, &(&self.transition[a] * v));
        }
        out
    }
}

/// Entry-wise tolerance used to declare a transient distribution mixed:
/// `|p*(s) − pᵗ(s)| ≤ abs + rel · pᵗ(s)` for every `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingTolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for MixingTolerance {
    fn default() -> Self {
        Self { abs: 1e-6, rel: 1e-5 }
    }
}

impl MixingTolerance {
    pub fn is_mixed(&self, p_star: &DVector<f64>, p_t: &DVector<f64>) -> bool {
        p_star
            .iter()
            .zip(p_t.iter())
            .all(|(&ps, &pt)| (ps - pt).abs() <= self.abs + self.rel * pt)
    }
}

/// Which starting states the mixing time is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixingOrigin {
    /// Only the MDP's designated initial state.
    #[default]
    InitialState,
    /// Worst case over every starting state.
    AllStates,
}

/// Markov chain induced by a stationary policy.
#[derive(Debug, Clone)]
pub struct ChainAnalysis {
    /// `P_π`.
    pub p: DMatrix<f64>,
    /// `P*_π`, every row equal to `p_star`.
    pub p_star_matrix: DMatrix<f64>,
    /// Stationary distribution.
    pub p_star: DVector<f64>,
    /// Deviation matrix `(I − P + P*)⁻¹ (I − P*)`.
    pub deviation: DMatrix<f64>,
    /// `(I − P + P*)⁻¹`, kept for solves against other right-hand sides.
    pub fundamental: DMatrix<f64>,
    pub t_mix: usize,
    /// `r_π(s) = Σ_a π(a|s) r(s,a)`.
    pub r_pi: DVector<f64>,
    pub initial_state: usize,
    pub tolerance: MixingTolerance,
}

/// Analyses the chain `policy` induces on `mdp`, measuring the mixing time
/// from the initial state with the default tolerance.
pub fn induced_chain(mdp: &MdpModel, policy: &TabularPolicy) -> Result<ChainAnalysis> {
    induced_chain_with(mdp, policy, MixingTolerance::default(), MixingOrigin::InitialState)
}

pub fn induced_chain_with(
    mdp: &MdpModel,
    policy: &TabularPolicy,
    tolerance: MixingTolerance,
    origin: MixingOrigin,
) -> Result<ChainAnalysis> {
    let n = mdp.n_states();
    if policy.n_states() != n {
        return Err(Error::DimensionMismatch {
            policy: policy.n_states(),
            mdp: n,
        });
    }
    let (p, r_pi) = policy_matrices(mdp, policy);
    from_transition_matrix(p, r_pi, mdp.initial_state(), tolerance, origin)
}

/// `P_π` and `r_π`; the caller checks dimensions.
pub(crate) fn policy_matrices(mdp: &MdpModel, policy: &TabularPolicy) -> (DMatrix<f64>, DVector<f64>) {
    let n = mdp.n_states();
    let mut p = DMatrix::zeros(n, n);
    let mut r_pi = DVector::zeros(n);
    for s in 0..n {
        for a in 0..N_ACTIONS {
            let w = policy.prob(s, a);
            for next in 0..n {
                p[(s, next)] += w * mdp.prob(s, a, next);
            }
            r_pi[s] += w * mdp.reward(s, a);
        }
    }
    (p, r_pi)
}

/// Chain analysis for an explicit transition matrix and reward vector.
pub fn from_transition_matrix(
    p: DMatrix<f64>,
    r_pi: DVector<f64>,
    initial_state: usize,
    tolerance: MixingTolerance,
    origin: MixingOrigin,
) -> Result<ChainAnalysis> {
    let n = p.nrows();
    let p_star = stationary_distribution(&p)?;
    let p_star_matrix = DMatrix::from_fn(n, n, |_, j| p_star[j]);
    let identity = DMatrix::<f64>::identity(n, n);
    let fundamental = (&identity - &p + &p_star_matrix)
        .try_inverse()
        .ok_or(Error::NonUnichain("I - P + P* is singular"))?;
    let deviation = &fundamental * (&identity - &p_star_matrix);

    let mut chain = ChainAnalysis {
        p,
        p_star_matrix,
        p_star,
        deviation,
        fundamental,
        t_mix: 0,
        r_pi,
        initial_state,
        tolerance,
    };
    chain.t_mix = match origin {
        MixingOrigin::InitialState => chain.mixing_time_from(initial_state)?,
        MixingOrigin::AllStates => {
            let mut worst = 0;
            for s0 in 0..n {
                worst = worst.max(chain.mixing_time_from(s0)?);
            }
            worst
        }
    };
    Ok(chain)
}

/// Solves `p (P − I) = 0`, `Σ p = 1` by replacing one balance equation with
/// the normalisation constraint.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let x = a
        .lu()
        .solve(&b)
        .ok_or(Error::NonUnichain("stationary equations are singular"))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonUnichain("stationary solve produced non-finite values"));
    }
    Ok(x)
}

impl ChainAnalysis {
    pub fn n_states(&self) -> usize {
        self.p.nrows()
    }

    pub fn gain(&self) -> f64 {
        self.p_star.dot(&self.r_pi)
    }

    /// Smallest `t` with `Pᵗ[s0, ·]` within tolerance of `p*`.
    pub fn mixing_time_from(&self, s0: usize) -> Result<usize> {
        if s0 >= self.n_states() {
            return Err(Error::StateOutOfRange(s0));
        }
        let mut dist = one_hot(self.n_states(), s0);
        for t in 0..=MIXING_CAP {
            if self.tolerance.is_mixed(&self.p_star, &dist) {
                return Ok(t);
            }
            dist = self.step(&dist);
        }
        Err(Error::MixingCapExceeded(MIXING_CAP))
    }

    /// One step of the state distribution: `d ↦ dᵀ P`.
    pub fn step(&self, dist: &DVector<f64>) -> DVector<f64> {
        self.p.tr_mul(dist)
    }

    /// The distributions `pᵗ(·|s0)` for `t = 0, 1, 2, ...`.
    pub fn distributions_from(&self, s0: usize) -> impl Iterator<Item = DVector<f64>> + '_ {
        let first = one_hot(self.n_states(), s0);
        std::iter::successors(Some(first), move |d| Some(self.step(d)))
    }
}

/// Row `s0` of `Pᵗ`.
pub fn t_step_distribution(chain: &ChainAnalysis, s0: usize, t: usize) -> Result<DVector<f64>> {
    if s0 >= chain.n_states() {
        return Err(Error::StateOutOfRange(s0));
    }
    Ok(chain.distributions_from(s0).nth(t).expect("infinite iterator"))
}

pub(crate) fn one_hot(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use crate::policy::TabularPolicy;
    use approx::assert_abs_diff_eq;

    fn power_limit(p: &DMatrix<f64>, s0: usize, t: usize) -> DVector<f64> {
        let mut d = one_hot(p.nrows(), s0);
        for _ in 0..t {
            d = p.tr_mul(&d);
        }
        d
    }

    #[test]
    fn env_a1_deterministic_a01() {
        let mdp = envs::builtin("env_a1").unwrap().mdp;
        let policy = TabularPolicy::deterministic(&[1, 0]);
        let chain = induced_chain(&mdp, &policy).unwrap();
        assert_abs_diff_eq!(chain.p, DMatrix::from_row_slice(2, 2, &[0., 1., 0., 1.]), epsilon = 1e-15);
        assert_abs_diff_eq!(chain.p_star, DVector::from_vec(vec![0., 1.]), epsilon = 1e-12);
        assert_abs_diff_eq!(
            chain.deviation,
            DMatrix::from_row_slice(2, 2, &[1., -1., 0., 0.]),
            epsilon = 1e-12
        );
        assert_eq!(chain.t_mix, 1);
        // brute-force oracle: power iteration reaches p* after one step
        assert_abs_diff_eq!(power_limit(&chain.p, 0, 1), chain.p_star, epsilon = 1e-15);
    }

    #[test]
    fn doubly_stochastic_is_uniform() {
        let p = DMatrix::from_element(2, 2, 0.5);
        assert_abs_diff_eq!(
            stationary_distribution(&p).unwrap(),
            DVector::from_vec(vec![0.5, 0.5]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn single_state_chain() {
        let mdp = MdpModel::new(&[vec![vec![1.0], vec![1.0]]], &[vec![1.0, 2.0]], 0).unwrap();
        let chain = induced_chain(&mdp, &TabularPolicy::uniform(1)).unwrap();
        assert_abs_diff_eq!(chain.p[(0, 0)], 1.0);
        assert_abs_diff_eq!(chain.p_star_matrix[(0, 0)], 1.0);
        assert_abs_diff_eq!(chain.deviation[(0, 0)], 0.0);
        assert_eq!(chain.t_mix, 0);
    }

    #[test]
    fn t_step_examples() {
        let mdp = envs::builtin("env_a1").unwrap().mdp;
        let chain = induced_chain(&mdp, &TabularPolicy::deterministic(&[1, 0])).unwrap();
        assert_eq!(t_step_distribution(&chain, 0, 0).unwrap(), one_hot(2, 0));
        assert_abs_diff_eq!(
            t_step_distribution(&chain, 0, 1).unwrap(),
            DVector::from_vec(vec![0., 1.]),
            epsilon = 1e-15
        );
        assert!(t_step_distribution(&chain, 2, 0).is_err());

        let mixed = induced_chain(&mdp, &TabularPolicy::uniform(2)).unwrap();
        for t in mixed.t_mix..mixed.t_mix + 5 {
            let d = t_step_distribution(&mixed, 0, t).unwrap();
            assert!(mixed.tolerance.is_mixed(&mixed.p_star, &d));
            assert_abs_diff_eq!(d.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let mdp = MdpModel::new(
            &[
                vec![vec![0., 1.], vec![0., 1.]],
                vec![vec![1., 0.], vec![1., 0.]],
            ],
            &[vec![0., 0.], vec![0., 0.]],
            0,
        )
        .unwrap();
        let err = induced_chain(&mdp, &TabularPolicy::uniform(2)).unwrap_err();
        assert!(matches!(err, Error::MixingCapExceeded(_)));
    }

    #[test]
    fn multichain_is_rejected() {
        let mdp = MdpModel::new(
            &[
                vec![vec![1., 0.], vec![1., 0.]],
                vec![vec![0., 1.], vec![0., 1.]],
            ],
            &[vec![0., 0.], vec![0., 0.]],
            0,
        )
        .unwrap();
        assert!(matches!(
            induced_chain(&mdp, &TabularPolicy::uniform(2)),
            Err(Error::NonUnichain(_))
        ));
    }

    #[test]
    fn invalid_models_are_rejected() {
        let bad_sum = MdpModel::new(&[vec![vec![0.9], vec![1.0]]], &[vec![0., 0.]], 0);
        assert!(matches!(
            bad_sum,
            Err(Error::NotStochastic { state: 0, action: 0, .. })
        ));
        let bad_init = MdpModel::new(&[vec![vec![1.0], vec![1.0]]], &[vec![0., 0.]], 3);
        assert!(matches!(bad_init, Err(Error::StateOutOfRange(3))));
        let bad_reward = MdpModel::new(&[vec![vec![1.0], vec![1.0]]], &[vec![f64::NAN, 0.]], 0);
        assert!(bad_reward.is_err());
    }

    #[test]
    fn worst_case_origin_dominates() {
        let mdp = envs::builtin("env_a2").unwrap().mdp;
        let policy = TabularPolicy::uniform(5);
        let from_init = induced_chain(&mdp, &policy).unwrap();
        let worst =
            induced_chain_with(&mdp, &policy, MixingTolerance::default(), MixingOrigin::AllStates)
                .unwrap();
        assert!(worst.t_mix >= from_init.t_mix);
    }
}

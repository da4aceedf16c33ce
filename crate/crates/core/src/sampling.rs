//! Experiment-episode simulation and the sample-based gradient and Fisher
//! estimators built from it.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::PolicySnapshot;
use crate::gradients;
use crate::mdp::{self, MdpModel, N_ACTIONS};
use crate::policy::{PolicyParams, TabularPolicy};

pub const DEFAULT_N_XEP: usize = 16;
/// Episodes run this many steps past the mixing time they must cover.
pub const MIXING_MARGIN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub n_xep: usize,
    /// Index of the last step; an episode has `t_xepmax + 1` steps.
    pub t_xepmax: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn new(n_xep: usize, t_xepmax: usize, seed: u64) -> Self {
        Self { n_xep, t_xepmax, seed }
    }

    /// Episode length covering a mixing time of `t_mix` with the default margin.
    pub fn covering(t_mix: usize, seed: u64) -> Self {
        Self::new(DEFAULT_N_XEP, t_mix + MIXING_MARGIN, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.n_xep == 0 {
            return Err(Error::InvalidConfig("n_xep must be positive".into()));
        }
        if self.t_xepmax == 0 {
            return Err(Error::InvalidConfig("t_xepmax must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seed of substream `index` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    SplitMix64::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

/// Independent generator for episode `index` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, index: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(episode_seed(seed, index))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub next: usize,
}

fn draw(weights: impl Iterator<Item = f64>, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    // roundoff left u above the total mass
    last
}

fn draw_action(policy: &TabularPolicy, s: usize, rng: &mut impl Rng) -> usize {
    draw((0..N_ACTIONS).map(|a| policy.prob(s, a)), rng)
}

fn draw_next(mdp: &MdpModel, s: usize, a: usize, rng: &mut impl Rng) -> usize {
    draw((0..mdp.n_states()).map(|x| mdp.prob(s, a, x)), rng)
}

/// Rolls out `t_max + 1` steps from the initial state.
pub fn simulate_episode(
    mdp: &MdpModel,
    params: &PolicyParams,
    t_max: usize,
    rng: &mut impl Rng,
) -> Vec<Transition> {
    let policy = params.tabular(mdp);
    let mut s = mdp.initial_state();
    (0..=t_max)
        .map(|_| {
            let a = draw_action(&policy, s, rng);
            let next = draw_next(mdp, s, a, rng);
            let tr = Transition { s, a, r: mdp.reward(s, a), next };
            s = next;
            tr
        })
        .collect()
}

/// Source of the `∇q_b(s, a)` term at the final step of an episode.
#[derive(Debug, Clone)]
pub enum GradQbBackend {
    /// Finite-difference Jacobian of exact `q_b`.
    FiniteDifference { jacobian: Vec<[Vector2<f64>; N_ACTIONS]> },
    /// `q₁(s,a) ∇log π(a|s) − ∇v_g`, whose stationary mean plus `∇v_g` is
    /// the q₁ form of the post-mixing term.
    Q1Substitution { q1: DMatrix<f64>, gain_grad: Vector2<f64> },
}

impl GradQbBackend {
    pub fn finite_difference(mdp: &MdpModel, params: &PolicyParams, step: f64) -> Result<Self> {
        Ok(Self::FiniteDifference {
            jacobian: gradients::q_b_jacobian(mdp, params, step)?,
        })
    }

    pub fn q1_substitution(snap: &PolicySnapshot) -> Self {
        Self::Q1Substitution {
            q1: snap.eval.q1.clone(),
            gain_grad: gradients::gain_gradient(snap),
        }
    }

    fn term(&self, params: &PolicyParams, s: usize, a: usize) -> Vector2<f64> {
        match self {
            Self::FiniteDifference { jacobian } => jacobian[s][a],
            Self::Q1Substitution { q1, gain_grad } => params.score(s, a) * q1[(s, a)] - gain_grad,
        }
    }
}

/// Per-episode samples of the four estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSample {
    pub grad_g: Vector2<f64>,
    pub grad_b: Vector2<f64>,
    pub fisher_g: Matrix2<f64>,
    pub fisher_b: Matrix2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradFisherEstimate {
    pub grad_g: Vector2<f64>,
    pub grad_b: Vector2<f64>,
    pub fisher_g: Matrix2<f64>,
    pub fisher_b: Matrix2<f64>,
    pub per_episode: Vec<EpisodeSample>,
    pub t_xepmax: usize,
    /// Mixing time of the evaluated policy from the initial state.
    pub t_mix: usize,
}

impl GradFisherEstimate {
    /// Whether episodes were long enough for the estimates to be unbiased.
    pub fn covers_mixing(&self) -> bool {
        self.t_xepmax >= self.t_mix
    }

    fn se_of<const R: usize, const C: usize>(
        &self,
        pick: impl Fn(&EpisodeSample) -> nalgebra::SMatrix<f64, R, C>,
        mean: &nalgebra::SMatrix<f64, R, C>,
    ) -> nalgebra::SMatrix<f64, R, C> {
        let n = self.per_episode.len() as f64;
        if n < 2.0 {
            return nalgebra::SMatrix::zeros();
        }
        let ss = self
            .per_episode
            .iter()
            .map(|e| (pick(e) - mean).map(|x| x * x))
            .fold(nalgebra::SMatrix::zeros(), |acc, x| acc + x);
        (ss / (n - 1.0)).map(|v| (v / n).sqrt())
    }

    /// Entry-wise standard errors of the four means.
    pub fn se_grad_g(&self) -> Vector2<f64> {
        self.se_of(|e| e.grad_g, &self.grad_g)
    }

    pub fn se_grad_b(&self) -> Vector2<f64> {
        self.se_of(|e| e.grad_b, &self.grad_b)
    }

    pub fn se_fisher_g(&self) -> Matrix2<f64> {
        self.se_of(|e| e.fisher_g, &self.fisher_g)
    }

    pub fn se_fisher_b(&self) -> Matrix2<f64> {
        self.se_of(|e| e.fisher_b, &self.fisher_b)
    }
}

/// One experiment-episode of the estimator. Steps `t < T` accumulate
/// `q_b ∇log π` into the bias gradient and, for `t < 2`, the score outer
/// product into the bias Fisher; step `T` yields the gain samples and closes
/// the bias samples.
fn run_episode(
    mdp: &MdpModel,
    params: &PolicyParams,
    policy: &TabularPolicy,
    q_b: &DMatrix<f64>,
    backend: &GradQbBackend,
    t_xepmax: usize,
    rng: &mut impl Rng,
) -> EpisodeSample {
    let mut grad_b = Vector2::zeros();
    let mut fisher_b = Matrix2::zeros();
    let mut s = mdp.initial_state();
    for t in 0..t_xepmax {
        let a = draw_action(policy, s, rng);
        let score = params.score(s, a);
        grad_b += score * q_b[(s, a)];
        if t < 2 {
            fisher_b += score * score.transpose();
        }
        s = draw_next(mdp, s, a, rng);
    }
    // the successor of the last step is never needed
    let a = draw_action(policy, s, rng);
    let score = params.score(s, a);
    let grad_g = score * q_b[(s, a)];
    let fisher_g = score * score.transpose();
    grad_b += backend.term(params, s, a) - grad_g * (t_xepmax as f64 - 1.0);
    fisher_b += fisher_g * 2.0;
    EpisodeSample {
        grad_g,
        grad_b,
        fisher_g,
        fisher_b,
    }
}

/// Sample means of the gain and bias gradients and Fishers over `cfg.n_xep`
/// independent episodes. `q_b` is the exact bias Q-table of the policy.
pub fn run_alg2(
    mdp: &MdpModel,
    params: &PolicyParams,
    q_b: &DMatrix<f64>,
    backend: &GradQbBackend,
    cfg: &EpisodeConfig,
) -> Result<GradFisherEstimate> {
    cfg.validate()?;
    if q_b.nrows() != mdp.n_states() || q_b.ncols() != N_ACTIONS {
        return Err(Error::DimensionMismatch {
            policy: q_b.nrows(),
            mdp: mdp.n_states(),
        });
    }
    let policy = params.tabular(mdp);
    let t_mix = mdp::induced_chain(mdp, &policy)?.t_mix;
    let per_episode: Vec<EpisodeSample> = (0..cfg.n_xep as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(cfg.seed, i);
            run_episode(mdp, params, &policy, q_b, backend, cfg.t_xepmax, &mut rng)
        })
        .collect();
    // sequential reduction keeps the result independent of the worker count
    let n = per_episode.len() as f64;
    let mut est = GradFisherEstimate {
        grad_g: Vector2::zeros(),
        grad_b: Vector2::zeros(),
        fisher_g: Matrix2::zeros(),
        fisher_b: Matrix2::zeros(),
        per_episode: Vec::new(),
        t_xepmax: cfg.t_xepmax,
        t_mix,
    };
    for e in &per_episode {
        est.grad_g += e.grad_g;
        est.grad_b += e.grad_b;
        est.fisher_g += e.fisher_g;
        est.fisher_b += e.fisher_b;
    }
    est.grad_g /= n;
    est.grad_b /= n;
    est.fisher_g /= n;
    est.fisher_b /= n;
    est.per_episode = per_episode;
    Ok(est)
}

/// Convenience wrapper: exact `q_b` and the q₁ backend for `params`.
pub fn estimate(mdp: &MdpModel, snap: &PolicySnapshot, cfg: &EpisodeConfig) -> Result<GradFisherEstimate> {
    run_alg2(mdp, &snap.params, &snap.eval.q_b, &GradQbBackend::q1_substitution(snap), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use crate::fisher;
    use approx::assert_abs_diff_eq;

    fn env(name: &str) -> MdpModel {
        envs::builtin(name).unwrap().mdp
    }

    #[test]
    fn deterministic_chain_has_unique_trajectory() {
        // A1 with a01 almost surely: s0 → s1 → s1 ...
        let mdp = env("env_a1");
        let p = PolicyParams::new(0.0, -60.0);
        let tr = simulate_episode(&mdp, &p, 3, &mut episode_rng(1, 0));
        let states: Vec<usize> = tr.iter().map(|t| t.s).collect();
        assert_eq!(states, vec![0, 1, 1, 1]);
        assert_eq!(tr[0].a, 1);
        assert_eq!(tr[0].r, 10.0);
        assert_eq!(tr.len(), 4);
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let mdp = env("env_b1");
        let p = PolicyParams::new(0.1, 0.2);
        let a = simulate_episode(&mdp, &p, 20, &mut episode_rng(9, 3));
        let b = simulate_episode(&mdp, &p, 20, &mut episode_rng(9, 3));
        assert_eq!(a, b);
        let snap = PolicySnapshot::new(&mdp, p).unwrap();
        let cfg = EpisodeConfig::new(64, 20, 5);
        let e1 = estimate(&mdp, &snap, &cfg).unwrap();
        let e2 = estimate(&mdp, &snap, &cfg).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn single_state_estimates_are_exact() {
        let mdp = MdpModel::new(&[vec![vec![1.0], vec![1.0]]], &[vec![1.0, 1.0]], 0).unwrap();
        let snap = PolicySnapshot::new(&mdp, PolicyParams::new(0.0, 0.0)).unwrap();
        let est = estimate(&mdp, &snap, &EpisodeConfig::new(32, 3, 0)).unwrap();
        assert_abs_diff_eq!(est.grad_b, Vector2::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(est.se_grad_b(), Vector2::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn means_are_episode_averages() {
        let mdp = env("env_a2");
        let snap = PolicySnapshot::new(&mdp, PolicyParams::new(0.2, -0.3)).unwrap();
        let est = estimate(&mdp, &snap, &EpisodeConfig::new(50, 6, 11)).unwrap();
        let n = est.per_episode.len() as f64;
        let mean_b: Vector2<f64> = est.per_episode.iter().map(|e| e.grad_b).sum::<Vector2<f64>>() / n;
        let mean_fb: Matrix2<f64> = est.per_episode.iter().map(|e| e.fisher_b).sum::<Matrix2<f64>>() / n;
        assert_abs_diff_eq!(est.grad_b, mean_b, epsilon = 1e-12);
        assert_abs_diff_eq!(est.fisher_b, mean_fb, epsilon = 1e-12);
        assert!(est.fisher_b.symmetric_eigenvalues().min() >= -1e-10);
        assert!(est.covers_mixing() == (6 >= snap.chain().t_mix));
    }

    #[test]
    fn closing_subtraction_equals_per_term_rearrangement() {
        // Σ_{t<T} z_t + Y − (T−1) z_T  ==  Σ_{t<T} (z_t − z_T) + (Y + z_T)
        let mdp = env("env_b1");
        let p = PolicyParams::new(0.4, -0.2);
        let snap = PolicySnapshot::new(&mdp, p).unwrap();
        let backend = GradQbBackend::q1_substitution(&snap);
        let t_max = 7;
        let mut rng = episode_rng(3, 0);
        let sample = run_episode(&mdp, &p, &snap.policy, &snap.eval.q_b, &backend, t_max, &mut rng);
        let mut rng = episode_rng(3, 0);
        let mut zs = Vec::new();
        let mut s = mdp.initial_state();
        for _ in 0..t_max {
            let a = draw_action(&snap.policy, s, &mut rng);
            zs.push(p.score(s, a) * snap.eval.q_b[(s, a)]);
            s = draw_next(&mdp, s, a, &mut rng);
        }
        let a = draw_action(&snap.policy, s, &mut rng);
        let z_last = p.score(s, a) * snap.eval.q_b[(s, a)];
        let y = backend.term(&p, s, a);
        let rearranged: Vector2<f64> = zs.iter().map(|z| z - z_last).sum::<Vector2<f64>>() + (y + z_last);
        assert_abs_diff_eq!(sample.grad_b, rearranged, epsilon = 1e-12);
        assert_abs_diff_eq!(sample.grad_g, z_last, epsilon = 0.0);
    }

    #[test]
    fn estimators_track_exact_values() {
        let mdp = env("env_b1");
        let p = PolicyParams::new(0.0, 0.0);
        let snap = PolicySnapshot::new(&mdp, p).unwrap();
        let cfg = EpisodeConfig::covering(snap.chain().t_mix, 42);
        let cfg = EpisodeConfig { n_xep: 4000, ..cfg };
        let est = estimate(&mdp, &snap, &cfg).unwrap();
        let exact_b = gradients::bias_gradient(&mdp, &snap, 0).unwrap();
        let exact_fb = fisher::bias_fisher_sampling_from(&snap, 0, 2).unwrap().m;
        for k in 0..2 {
            assert!((est.grad_b[k] - exact_b[k]).abs() <= 4.0 * est.se_grad_b()[k]);
        }
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            assert!((est.fisher_b[(i, j)] - exact_fb[(i, j)]).abs() <= 4.0 * est.se_fisher_b()[(i, j)] + 1e-12);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mdp = env("env_a1");
        let snap = PolicySnapshot::new(&mdp, PolicyParams::new(0.0, 0.0)).unwrap();
        assert!(estimate(&mdp, &snap, &EpisodeConfig::new(0, 3, 0)).is_err());
        assert!(estimate(&mdp, &snap, &EpisodeConfig::new(4, 0, 0)).is_err());
    }
}

//! Exact policy gradients of gain, bias and scaled discounted value,
//! the pre-/post-mixing decomposition of the bias gradient, and
//! finite-difference oracles.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::eval::{self, PolicySnapshot};
use crate::mdp::{MdpModel, N_ACTIONS};
use crate::policy::PolicyParams;

/// Central-difference step for gradients.
pub const FD_GRAD_STEP: f64 = 1e-5;
/// Central-difference step for Hessians.
pub const FD_HESSIAN_STEP: f64 = 1e-4;

/// `h(s) = Σ_a π(a|s) w(s,a) ∇log π(a|s)` for a per-state-action weight `w`.
fn score_weighted(snap: &PolicySnapshot, s: usize, w: impl Fn(usize, usize) -> f64) -> Vector2<f64> {
    (0..N_ACTIONS)
        .map(|a| snap.params.score(s, a) * (snap.policy.prob(s, a) * w(s, a)))
        .sum()
}

/// `Σ_a π(a|s) q_b(s,a) ∇log π(a|s)` for every state.
pub fn state_score_q(snap: &PolicySnapshot) -> Vec<Vector2<f64>> {
    (0..snap.policy.n_states())
        .map(|s| score_weighted(snap, s, |s, a| snap.eval.q_b[(s, a)]))
        .collect()
}

fn stationary_mean(snap: &PolicySnapshot, per_state: &[Vector2<f64>]) -> Vector2<f64> {
    per_state
        .iter()
        .enumerate()
        .map(|(s, h)| h * snap.chain().p_star[s])
        .sum()
}

/// `∇v_g = Σ_s p*(s) Σ_a π(a|s) q_b(s,a) ∇log π(a|s)`.
pub fn gain_gradient(snap: &PolicySnapshot) -> Vector2<f64> {
    stationary_mean(snap, &state_score_q(snap))
}

pub fn gain_gradient_exact(mdp: &MdpModel, params: &PolicyParams) -> Result<Vector2<f64>> {
    Ok(gain_gradient(&PolicySnapshot::new(mdp, *params)?))
}

/// How the post-mixing part of the bias gradient is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PostmixBackend {
    /// `Σ_s p*(s) Σ_a π q₁ ∇log π`; needs no derivative of any value function.
    #[default]
    Q1,
    /// `Σ_s p*(s) Σ_a π ∇q_b + ∇v_g` with `∇q_b` by central differences.
    FiniteDifference { step: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasGradientBreakdown {
    /// Term `t` is `Σ_s pᵗ(s|s0) Σ_a π q_b ∇log π − ∇v_g`, for `t < t_mix`.
    pub premix_terms: Vec<Vector2<f64>>,
    /// Includes the `+∇v_g` that completes the decomposition.
    pub postmix_term: Vector2<f64>,
    pub total: Vector2<f64>,
    pub gain_grad: Vector2<f64>,
}

/// Bias gradient at `s0` split into pre- and post-mixing parts, with the
/// q₁ post-mixing backend.
pub fn bias_gradient_thm1(
    mdp: &MdpModel,
    params: &PolicyParams,
    s0: usize,
) -> Result<BiasGradientBreakdown> {
    let snap = PolicySnapshot::new(mdp, *params)?;
    bias_gradient_breakdown(mdp, &snap, s0, PostmixBackend::Q1)
}

pub fn bias_gradient_breakdown(
    mdp: &MdpModel,
    snap: &PolicySnapshot,
    s0: usize,
    backend: PostmixBackend,
) -> Result<BiasGradientBreakdown> {
    let chain = snap.chain();
    let t_mix = if s0 == chain.initial_state {
        chain.t_mix
    } else {
        chain.mixing_time_from(s0)?
    };
    let h = state_score_q(snap);
    let gain_grad = stationary_mean(snap, &h);
    let premix_terms: Vec<Vector2<f64>> = chain
        .distributions_from(s0)
        .take(t_mix)
        .map(|d| h.iter().enumerate().map(|(s, hs)| hs * d[s]).sum::<Vector2<f64>>() - gain_grad)
        .collect();
    let postmix_term = match backend {
        PostmixBackend::Q1 => postmix_q1_from(snap),
        PostmixBackend::FiniteDifference { step } => postmix_qb_from(mdp, snap, gain_grad, step)?,
    };
    let total = premix_terms.iter().sum::<Vector2<f64>>() + postmix_term;
    Ok(BiasGradientBreakdown {
        premix_terms,
        postmix_term,
        total,
        gain_grad,
    })
}

/// Exact `∇v_b(θ, s0)`.
pub fn bias_gradient(mdp: &MdpModel, snap: &PolicySnapshot, s0: usize) -> Result<Vector2<f64>> {
    Ok(bias_gradient_breakdown(mdp, snap, s0, PostmixBackend::Q1)?.total)
}

pub fn postmix_q1(mdp: &MdpModel, params: &PolicyParams) -> Result<Vector2<f64>> {
    Ok(postmix_q1_from(&PolicySnapshot::new(mdp, *params)?))
}

pub fn postmix_q1_from(snap: &PolicySnapshot) -> Vector2<f64> {
    let per_state: Vec<Vector2<f64>> = (0..snap.policy.n_states())
        .map(|s| score_weighted(snap, s, |s, a| snap.eval.q1[(s, a)]))
        .collect();
    stationary_mean(snap, &per_state)
}

pub fn postmix_qb(mdp: &MdpModel, params: &PolicyParams, fd_step: f64) -> Result<Vector2<f64>> {
    let snap = PolicySnapshot::new(mdp, *params)?;
    let g = gain_gradient(&snap);
    postmix_qb_from(mdp, &snap, g, fd_step)
}

fn postmix_qb_from(
    mdp: &MdpModel,
    snap: &PolicySnapshot,
    gain_grad: Vector2<f64>,
    fd_step: f64,
) -> Result<Vector2<f64>> {
    let dq = q_b_jacobian(mdp, &snap.params, fd_step)?;
    let mut acc = gain_grad;
    for s in 0..mdp.n_states() {
        for a in 0..N_ACTIONS {
            acc += dq[s][a] * (snap.chain().p_star[s] * snap.policy.prob(s, a));
        }
    }
    Ok(acc)
}

/// `∇_θ q_b(s,a)` for every pair, by central differences of exact `q_b`.
pub fn q_b_jacobian(
    mdp: &MdpModel,
    params: &PolicyParams,
    step: f64,
) -> Result<Vec<[Vector2<f64>; N_ACTIONS]>> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step {step} must be positive")));
    }
    let n = mdp.n_states();
    let mut out = vec![[Vector2::zeros(); N_ACTIONS]; n];
    for k in 0..2 {
        let (plus, minus) = shifted(params, k, step);
        let qp = eval::evaluate(mdp, &plus.tabular(mdp))?.q_b;
        let qm = eval::evaluate(mdp, &minus.tabular(mdp))?.q_b;
        for s in 0..n {
            for a in 0..N_ACTIONS {
                out[s][a][k] = (qp[(s, a)] - qm[(s, a)]) / (2.0 * step);
            }
        }
    }
    Ok(out)
}

fn shifted(params: &PolicyParams, k: usize, step: f64) -> (PolicyParams, PolicyParams) {
    let mut plus = *params;
    let mut minus = *params;
    plus.theta[k] += step;
    minus.theta[k] -= step;
    (plus, minus)
}

/// Gradient of the scaled discounted value `(1−γ) v_γ(θ, s0)`.
pub fn discounted_gradient_exact(
    mdp: &MdpModel,
    params: &PolicyParams,
    s0: usize,
    gamma: f64,
) -> Result<Vector2<f64>> {
    if s0 >= mdp.n_states() {
        return Err(Error::StateOutOfRange(s0));
    }
    let policy = params.tabular(mdp);
    let d = eval::discounted_value(mdp, &policy, gamma)?;
    let mut acc = Vector2::zeros();
    for s in 0..mdp.n_states() {
        let weight = (1.0 - gamma) * d.resolvent[(s0, s)];
        for a in 0..N_ACTIONS {
            acc += params.score(s, a) * (weight * policy.prob(s, a) * d.q[(s, a)]);
        }
    }
    Ok(acc)
}

/// Error of one partial sum of the bias-gradient decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionEntry {
    /// Index of the last term included; the post-mixing term has index `t_mix`.
    pub t: usize,
    /// Angle to the full gradient in radians; NaN when either vector is zero.
    pub angular_error: f64,
    /// `|‖partial‖ − ‖full‖|`.
    pub norm_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub entries: Vec<DecompositionEntry>,
    /// Error of the post-mixing term alone.
    pub postmix_only: DecompositionEntry,
    pub t_mix: usize,
    /// Set when the full gradient is zero and angles are undefined.
    pub zero_gradient: bool,
}

fn angle_between(u: &Vector2<f64>, v: &Vector2<f64>) -> f64 {
    let denom = u.norm() * v.norm();
    if denom == 0.0 {
        return f64::NAN;
    }
    (u.dot(v) / denom).clamp(-1.0, 1.0).acos()
}

/// Errors of the gradual summation of bias-gradient terms: premix terms are
/// added one at a time, then the post-mixing term.
pub fn decomposition_diagnostic(
    mdp: &MdpModel,
    params: &PolicyParams,
    s0: usize,
) -> Result<DecompositionReport> {
    let snap = PolicySnapshot::new(mdp, *params)?;
    let b = bias_gradient_breakdown(mdp, &snap, s0, PostmixBackend::Q1)?;
    Ok(decomposition_of(&b))
}

pub fn decomposition_of(b: &BiasGradientBreakdown) -> DecompositionReport {
    let full = b.total;
    let entry = |t: usize, partial: &Vector2<f64>| DecompositionEntry {
        t,
        angular_error: angle_between(partial, &full),
        norm_error: (partial.norm() - full.norm()).abs(),
    };
    let t_mix = b.premix_terms.len();
    let mut entries = Vec::with_capacity(t_mix + 1);
    let mut partial = Vector2::zeros();
    for (t, term) in b.premix_terms.iter().enumerate() {
        partial += term;
        entries.push(entry(t, &partial));
    }
    partial += b.postmix_term;
    let mut last = entry(t_mix, &partial);
    // the completed sum is the full gradient by construction; any residue
    // is summation-order roundoff
    if (partial - full).norm() <= 1e-12 * (1.0 + full.norm()) && full.norm() > 0.0 {
        last.angular_error = 0.0;
        last.norm_error = 0.0;
    }
    entries.push(last);
    DecompositionReport {
        entries,
        postmix_only: entry(t_mix, &b.postmix_term),
        t_mix,
        zero_gradient: full.norm() == 0.0,
    }
}

/// Central-difference gradient of a scalar function of θ.
pub fn fd_gradient<F>(f: F, params: &PolicyParams, h: f64) -> Result<Vector2<f64>>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let mut g = Vector2::zeros();
    for k in 0..2 {
        let (plus, minus) = shifted(params, k, h);
        g[k] = (f(&plus)? - f(&minus)?) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Hessian, symmetrised.
pub fn fd_hessian<F>(f: F, params: &PolicyParams, h: f64) -> Result<Matrix2<f64>>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let at = |di: f64, dj: f64, i: usize, j: usize| {
        let mut p = *params;
        p.theta[i] += di;
        p.theta[j] += dj;
        f(&p)
    };
    let mut hess = Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            hess[(i, j)] = if i == j {
                (at(h, 0.0, i, j)? - 2.0 * f(params)? + at(-h, 0.0, i, j)?) / (h * h)
            } else {
                (at(h, h, i, j)? - at(h, -h, i, j)? - at(-h, h, i, j)? + at(-h, -h, i, j)?)
                    / (4.0 * h * h)
            };
        }
    }
    Ok((hess + hess.transpose()) * 0.5)
}

/// Exact scalar objectives used by finite-difference oracles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Gain,
    Bias { s0: usize },
    BiasBarrier { s0: usize, g_star: f64, beta: f64, zeta: f64 },
}

impl Objective {
    pub fn value(&self, mdp: &MdpModel, params: &PolicyParams) -> Result<f64> {
        let e = eval::evaluate(mdp, &params.tabular(mdp))?;
        match *self {
            Objective::Gain => Ok(e.gain),
            Objective::Bias { s0 } => Ok(e.bias[s0]),
            Objective::BiasBarrier { s0, g_star, beta, zeta } => {
                let arg = e.gain - g_star + zeta;
                if arg <= 0.0 {
                    return Err(Error::BarrierDomain(arg));
                }
                Ok(e.bias[s0] + beta * arg.ln())
            }
        }
    }
}

pub fn hessian_fd(
    objective: Objective,
    mdp: &MdpModel,
    params: &PolicyParams,
    h: f64,
) -> Result<Matrix2<f64>> {
    fd_hessian(|p| objective.value(mdp, p), params, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use approx::assert_abs_diff_eq;

    fn env(name: &str) -> MdpModel {
        envs::builtin(name).unwrap().mdp
    }

    fn single_state() -> MdpModel {
        MdpModel::new(&[vec![vec![1.0], vec![1.0]]], &[vec![2.0, 2.0]], 0).unwrap()
    }

    #[test]
    fn flat_gain_on_env_a1() {
        let mdp = env("env_a1");
        for (t0, t1) in [(0.0, 0.0), (3.0, -2.0), (-4.0, 4.5)] {
            let g = gain_gradient_exact(&mdp, &PolicyParams::new(t0, t1)).unwrap();
            assert_abs_diff_eq!(g, Vector2::zeros(), epsilon = 1e-9);
        }
    }

    #[test]
    fn gain_gradient_matches_fd_on_b1() {
        let mdp = env("env_b1");
        let p = PolicyParams::new(0.0, 0.0);
        let fd = fd_gradient(|q| Objective::Gain.value(&mdp, q), &p, FD_GRAD_STEP).unwrap();
        let g = gain_gradient_exact(&mdp, &p).unwrap();
        assert_abs_diff_eq!(g, fd, epsilon = 1e-5);
    }

    #[test]
    fn single_state_gradients_vanish() {
        let mdp = single_state();
        let p = PolicyParams::new(1.0, -1.0);
        assert_eq!(gain_gradient_exact(&mdp, &p).unwrap(), Vector2::zeros());
        let b = bias_gradient_thm1(&mdp, &p, 0).unwrap();
        assert!(b.premix_terms.is_empty());
        assert_abs_diff_eq!(b.total, Vector2::zeros(), epsilon = 1e-15);
        assert_abs_diff_eq!(postmix_q1(&mdp, &p).unwrap(), Vector2::zeros(), epsilon = 1e-15);
        assert_abs_diff_eq!(postmix_qb(&mdp, &p, FD_GRAD_STEP).unwrap(), Vector2::zeros(), epsilon = 1e-9);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let mdp = env("env_b3");
        let snap = PolicySnapshot::new(&mdp, PolicyParams::new(0.3, -0.4)).unwrap();
        let b = bias_gradient_breakdown(&mdp, &snap, 0, PostmixBackend::Q1).unwrap();
        let sum: Vector2<f64> = b.premix_terms.iter().sum::<Vector2<f64>>() + b.postmix_term;
        assert_abs_diff_eq!(sum, b.total, epsilon = 1e-12);
        assert_eq!(b.premix_terms.len(), snap.chain().t_mix);
    }

    #[test]
    fn env_a1_origin_breakdown_has_flat_gain() {
        let b = bias_gradient_thm1(&env("env_a1"), &PolicyParams::new(0.0, 0.0), 0).unwrap();
        assert_abs_diff_eq!(b.gain_grad, Vector2::zeros(), epsilon = 1e-12);
        assert!(!b.premix_terms.is_empty());
    }

    #[test]
    fn bias_gradient_matches_fd() {
        for name in envs::BUILTIN_NAMES {
            let mdp = env(name);
            for (t0, t1) in [(0.2, -0.1), (-1.0, 1.5), (0.5, 2.0)] {
                let p = PolicyParams::new(t0, t1);
                let exact = bias_gradient_thm1(&mdp, &p, 0).unwrap().total;
                let fd = fd_gradient(|q| Objective::Bias { s0: 0 }.value(&mdp, q), &p, FD_GRAD_STEP)
                    .unwrap();
                let rel = (exact - fd).amax() / fd.amax().max(1e-300);
                assert!(rel < 1e-5, "{name} {t0} {t1}: {exact} vs {fd}");
            }
        }
    }

    #[test]
    fn postmix_backends_agree() {
        for name in envs::BUILTIN_NAMES {
            let mdp = env(name);
            let p = PolicyParams::new(-0.3, 0.8);
            let a = postmix_q1(&mdp, &p).unwrap();
            let b = postmix_qb(&mdp, &p, FD_GRAD_STEP).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn postmix_q1_near_deterministic_a1() {
        // p* sits on the absorbing state whose two actions are duplicates
        let v = postmix_q1(&env("env_a1"), &PolicyParams::new(0.0, -20.0)).unwrap();
        assert_abs_diff_eq!(v, Vector2::zeros(), epsilon = 1e-6);
    }

    #[test]
    fn discounted_gradient_checks() {
        let mdp = env("env_b1");
        let p = PolicyParams::new(0.7, -0.2);
        // myopic case
        let g0 = discounted_gradient_exact(&mdp, &p, 0, 0.0).unwrap();
        let myopic = fd_gradient(
            |q| Ok((0..2).map(|a| q.prob(0, a) * mdp.reward(0, a)).sum()),
            &p,
            FD_GRAD_STEP,
        )
        .unwrap();
        assert_abs_diff_eq!(g0, myopic, epsilon = 1e-8);
        // finite differences
        let gamma = 0.9;
        let g = discounted_gradient_exact(&mdp, &p, 0, gamma).unwrap();
        let fd = fd_gradient(
            |q| Ok(eval::discounted_value(&mdp, &q.tabular(&mdp), gamma)?.scaled_v[0]),
            &p,
            FD_GRAD_STEP,
        )
        .unwrap();
        assert_abs_diff_eq!(g, fd, epsilon = 1e-5);
        // near-one limit on a flat-gain environment
        let a1 = env("env_a1");
        let g1 = discounted_gradient_exact(&a1, &PolicyParams::new(0.0, 0.0), 0, 0.99999).unwrap();
        assert!(g1.amax() <= 1e-3);
    }

    #[test]
    fn decomposition_final_entry_is_exact() {
        let mdp = env("env_a2");
        let r = decomposition_diagnostic(&mdp, &PolicyParams::new(0.0, 0.0), 0).unwrap();
        let last = r.entries.last().unwrap();
        assert_eq!((last.angular_error, last.norm_error), (0.0, 0.0));
        assert_eq!(r.entries.len(), r.t_mix + 1);
    }

    #[test]
    fn decomposition_with_unit_mixing_time_has_two_entries() {
        // deterministic-like a01 policy on A1 mixes after one step
        let mdp = env("env_a1");
        let p = PolicyParams::new(0.0, -30.0);
        let r = decomposition_diagnostic(&mdp, &p, 0).unwrap();
        assert_eq!(r.t_mix, 1);
        assert_eq!(r.entries.len(), 2);
    }

    #[test]
    fn angle_of_zero_vector_is_nan() {
        assert!(angle_between(&Vector2::zeros(), &Vector2::new(1.0, 0.0)).is_nan());
        assert_abs_diff_eq!(
            angle_between(&Vector2::new(1.0, 0.0), &Vector2::new(0.0, 2.0)),
            std::f64::consts::FRAC_PI_2
        );
    }

    #[test]
    fn quadratic_hessian() {
        let f = |p: &PolicyParams| Ok(p.theta[0].powi(2) + 3.0 * p.theta[1].powi(2));
        let h = fd_hessian(f, &PolicyParams::new(0.3, -0.7), FD_HESSIAN_STEP).unwrap();
        assert_abs_diff_eq!(h, Matrix2::new(2.0, 0.0, 0.0, 6.0), epsilon = 1e-4);
    }

    #[test]
    fn gain_hessian_flat_on_a1() {
        let h = hessian_fd(Objective::Gain, &env("env_a1"), &PolicyParams::new(0.4, 0.1), FD_HESSIAN_STEP)
            .unwrap();
        assert_abs_diff_eq!(h, Matrix2::zeros(), epsilon = 1e-6);
    }

    #[test]
    fn bias_hessian_matches_fd_of_exact_gradient() {
        let mdp = env("env_b1");
        let p = PolicyParams::new(0.2, 0.3);
        let h = hessian_fd(Objective::Bias { s0: 0 }, &mdp, &p, FD_HESSIAN_STEP).unwrap();
        let mut jac = Matrix2::zeros();
        for k in 0..2 {
            let (plus, minus) = shifted(&p, k, FD_HESSIAN_STEP);
            let gp = bias_gradient_thm1(&mdp, &plus, 0).unwrap().total;
            let gm = bias_gradient_thm1(&mdp, &minus, 0).unwrap().total;
            jac.set_column(k, &((gp - gm) / (2.0 * FD_HESSIAN_STEP)));
        }
        let sym = (jac + jac.transpose()) * 0.5;
        assert_abs_diff_eq!(h, sym, epsilon = 1e-4);
    }

    #[test]
    fn barrier_objective_rejects_outside_domain() {
        let obj = Objective::BiasBarrier { s0: 0, g_star: 10.0, beta: 1.0, zeta: 1.0 };
        assert!(matches!(
            obj.value(&env("env_b1"), &PolicyParams::new(0.0, 0.0)),
            Err(Error::BarrierDomain(_))
        ));
    }
}

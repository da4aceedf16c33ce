//! Gain-then-bias-barrier policy optimization, bias-only ascent with several
//! preconditioners, the penalty-method and discounted baselines, and the
//! backtracking line search they share.

use nalgebra::{Matrix2, Vector2};
use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, PolicySnapshot};
use crate::fisher::{self, DEFAULT_JITTER};
use crate::gradients::{self, Objective, FD_HESSIAN_STEP};
use crate::mdp::MdpModel;
use crate::policy::PolicyParams;
use crate::sampling::{self, EpisodeConfig, DEFAULT_N_XEP, MIXING_MARGIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchConfig {
    /// Sufficient-increase constant.
    pub c1: f64,
    pub shrink: f64,
    pub alpha0: f64,
    pub max_iters: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            shrink: 0.5,
            alpha0: 1.0,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearchOutcome {
    Accepted,
    /// The direction does not increase the objective to first order.
    NonAscent,
    /// No probe satisfied the sufficient-increase condition.
    Exhausted,
}

/// Backtracking search for `α = α₀ ρᵏ` satisfying
/// `f(θ + αd) ≥ f(θ) + c₁ α ∇f·d`. Non-finite probes count as failures.
pub fn backtracking_line_search<F>(
    objective: F,
    theta: &Vector2<f64>,
    f0: f64,
    grad: &Vector2<f64>,
    direction: &Vector2<f64>,
    cfg: &LineSearchConfig,
) -> (f64, LineSearchOutcome)
where
    F: Fn(&Vector2<f64>) -> f64,
{
    let slope = grad.dot(direction);
    if !(slope > 0.0) || !f0.is_finite() {
        return (0.0, LineSearchOutcome::NonAscent);
    }
    let mut alpha = cfg.alpha0;
    for _ in 0..cfg.max_iters {
        let f = objective(&(theta + direction * alpha));
        if f.is_finite() && f >= f0 + cfg.c1 * alpha * slope {
            return (alpha, LineSearchOutcome::Accepted);
        }
        alpha *= cfg.shrink;
    }
    // the smallest probe is taken only where the objective is defined
    if objective(&(theta + direction * alpha)).is_finite() {
        (alpha, LineSearchOutcome::Exhausted)
    } else {
        (0.0, LineSearchOutcome::Exhausted)
    }
}

/// How gradients and Fishers are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mode {
    Exact,
    /// Sample-based estimates over experiment-episodes. `t_xepmax` defaults
    /// to the current policy's mixing time plus the standard margin.
    Sampling {
        n_xep: usize,
        t_xepmax: Option<usize>,
        seed: u64,
    },
}

impl Mode {
    pub fn sampling(seed: u64) -> Self {
        Mode::Sampling {
            n_xep: DEFAULT_N_XEP,
            t_xepmax: None,
            seed,
        }
    }
}

/// Preconditioner for bias ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasScheme {
    Identity,
    /// Negated finite-difference Hessian of the bias, repaired to be PD.
    Hessian,
    FisherAnalytic,
    /// Sampling-enabler Fisher with the given absorption horizon.
    FisherSampling(usize),
    Devmat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Gain-gradient norm below which gain optimization has converged.
    pub epsilon: f64,
    pub beta0: f64,
    pub zeta: f64,
    pub n_j: usize,
    pub n_k: usize,
    /// Divisor applied to the barrier parameter after each outer iteration.
    pub shrink: f64,
    pub mode: Mode,
    /// Bias preconditioner inside the barrier phase.
    pub bias_scheme: BiasScheme,
    /// Gradient-norm tolerance of bias-only, penalty and discounted runs.
    pub tol: f64,
    /// Iteration cap of bias-only, penalty and discounted runs.
    pub max_iters: usize,
    pub line_search: LineSearchConfig,
    pub jitter0: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            beta0: 0.1,
            zeta: 1.0,
            n_j: 100,
            n_k: 1,
            shrink: 10.0,
            mode: Mode::Exact,
            bias_scheme: BiasScheme::FisherSampling(2),
            tol: 1e-8,
            max_iters: 100,
            line_search: LineSearchConfig::default(),
            jitter0: DEFAULT_JITTER,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.beta0 >= 0.0) {
            return bad("beta0 must be nonnegative");
        }
        if !(self.zeta > 0.0) {
            return bad("zeta must be positive");
        }
        if !(self.shrink > 1.0) {
            return bad("barrier shrink factor must exceed 1");
        }
        if !(self.tol > 0.0) {
            return bad("tolerance must be positive");
        }
        let ls = &self.line_search;
        if !(ls.c1 > 0.0 && ls.c1 < 1.0 && ls.shrink > 0.0 && ls.shrink < 1.0 && ls.alpha0 > 0.0) {
            return bad("line-search constants out of range");
        }
        if let Mode::Sampling { n_xep, t_xepmax, .. } = self.mode {
            if n_xep == 0 || t_xepmax == Some(0) {
                return bad("sampling mode needs n_xep ≥ 1 and t_xepmax ≥ 1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Gain,
    BiasBarrier,
    Bias,
    Penalty,
    Discounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub theta: [f64; 2],
    pub phase: Phase,
    pub gain: f64,
    pub bias: f64,
    /// Value of the objective being ascended.
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub outcome: Option<LineSearchOutcome>,
    /// Diagonal jitter added to the preconditioner.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimTrace {
    pub records: Vec<IterRecord>,
    pub final_params: PolicyParams,
    pub final_gain: f64,
    pub final_bias: f64,
    /// Gain recorded when gain optimization converged.
    pub g_star: Option<f64>,
}

impl OptimTrace {
    /// Number of phase changes along the trace.
    pub fn phase_switches(&self) -> usize {
        self.records.windows(2).filter(|w| w[0].phase != w[1].phase).count()
    }
}

/// Value, ascent gradient and preconditioner of the bias-barrier objective
/// `v_b + β log(g − g* + ζ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierEval {
    pub value: f64,
    pub gradient: Vector2<f64>,
    pub precond: Matrix2<f64>,
}

/// Combines bias and gain quantities into the barrier objective.
#[allow(clippy::too_many_arguments)]
fn barrier_combine(
    bias: f64,
    gain: f64,
    grad_b: Vector2<f64>,
    grad_g: Vector2<f64>,
    fisher_b: Matrix2<f64>,
    fisher_g: Matrix2<f64>,
    g_star: f64,
    beta: f64,
    zeta: f64,
) -> Result<BarrierEval> {
    let arg = gain - g_star + zeta;
    if !(arg > 0.0) {
        return Err(Error::BarrierDomain(arg));
    }
    let beta_t = beta / arg;
    Ok(BarrierEval {
        value: bias + beta * arg.ln(),
        gradient: grad_b + grad_g * beta_t,
        precond: fisher_b + fisher_g * beta_t + grad_g * grad_g.transpose() * (beta / (arg * arg)),
    })
}

/// Exact bias-barrier evaluation with the two-step sampling-enabler bias
/// Fisher.
pub fn bias_barrier(
    mdp: &MdpModel,
    params: &PolicyParams,
    s0: usize,
    g_star: f64,
    beta: f64,
    zeta: f64,
) -> Result<BarrierEval> {
    let snap = PolicySnapshot::new(mdp, *params)?;
    let grad_b = gradients::bias_gradient(mdp, &snap, s0)?;
    barrier_combine(
        snap.bias_at(s0),
        snap.gain(),
        grad_b,
        gradients::gain_gradient(&snap),
        fisher::bias_fisher_sampling_from(&snap, s0, 2)?.m,
        fisher::gain_fisher_from(&snap).m,
        g_star,
        beta,
        zeta,
    )
}

fn bias_preconditioner(mdp: &MdpModel, snap: &PolicySnapshot, s0: usize, scheme: BiasScheme) -> Result<Matrix2<f64>> {
    Ok(match scheme {
        BiasScheme::Identity => Matrix2::identity(),
        BiasScheme::Hessian => -gradients::hessian_fd(Objective::Bias { s0 }, mdp, &snap.params, FD_HESSIAN_STEP)?,
        BiasScheme::FisherAnalytic => fisher::bias_fisher_analytic_from(snap, s0)?.m,
        BiasScheme::FisherSampling(t) => fisher::bias_fisher_sampling_from(snap, s0, t)?.m,
        BiasScheme::Devmat => fisher::devmat_fisher_from(snap, s0).m,
    })
}

/// Seed of the episodes drawn at optimization iteration `iter`.
fn iteration_seed(seed: u64, iter: usize) -> u64 {
    SplitMix64::seed_from_u64(seed.wrapping_add((iter as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))).next_u64()
}

fn sample_estimate(
    mdp: &MdpModel,
    snap: &PolicySnapshot,
    mode: &Mode,
    iter: usize,
) -> Result<Option<sampling::GradFisherEstimate>> {
    match *mode {
        Mode::Exact => Ok(None),
        Mode::Sampling { n_xep, t_xepmax, seed } => {
            let t = t_xepmax.unwrap_or(snap.chain().t_mix + MIXING_MARGIN).max(1);
            let cfg = EpisodeConfig::new(n_xep, t, iteration_seed(seed, iter));
            sampling::estimate(mdp, snap, &cfg).map(Some)
        }
    }
}

fn gain_value(mdp: &MdpModel, theta: &Vector2<f64>, s0: usize) -> Option<(f64, f64)> {
    let policy = PolicyParams::from_vector(*theta).tabular(mdp);
    eval::gain_and_bias(mdp, &policy, s0).ok()
}

/// One preconditioned ascent step; returns the updated θ, the step length,
/// the outcome and the jitter used.
fn ascent_step<F>(
    objective: F,
    theta: &Vector2<f64>,
    f0: f64,
    grad: &Vector2<f64>,
    precond: &Matrix2<f64>,
    cfg: &OptimConfig,
) -> Result<(Vector2<f64>, f64, LineSearchOutcome, f64)>
where
    F: Fn(&Vector2<f64>) -> f64,
{
    let (repaired, jitter) = fisher::ensure_positive_definite(precond, cfg.jitter0)?;
    let direction = repaired
        .cholesky()
        .ok_or(Error::PositiveDefiniteRepair(fisher::MAX_JITTER))?
        .solve(grad);
    let (alpha, outcome) = backtracking_line_search(objective, theta, f0, grad, &direction, &cfg.line_search);
    Ok((theta + direction * alpha, alpha, outcome, jitter))
}

/// Gain optimization followed by bias-barrier optimization from `params0`,
/// with bias measured from the MDP's initial state.
pub fn optimize_nbw(mdp: &MdpModel, params0: &PolicyParams, cfg: &OptimConfig) -> Result<OptimTrace> {
    cfg.validate()?;
    let s0 = mdp.initial_state();
    let mut theta = params0.theta;
    let mut beta = cfg.beta0;
    let mut g_star: Option<f64> = None;
    let mut records = Vec::new();
    let mut iter = 0usize;
    for _k in 0..cfg.n_k {
        for _j in 0..cfg.n_j {
            let snap = PolicySnapshot::new(mdp, PolicyParams::from_vector(theta))?;
            let gain = snap.gain();
            let bias = snap.bias_at(s0);
            let record = |phase, objective, grad_norm, step, outcome, jitter| IterRecord {
                theta: [theta[0], theta[1]],
                phase,
                gain,
                bias,
                objective,
                grad_norm,
                step,
                outcome,
                jitter,
            };
            match g_star {
                None => {
                    // gain optimization always uses exact quantities
                    let grad = gradients::gain_gradient(&snap);
                    if grad.norm() < cfg.epsilon {
                        g_star = Some(gain);
                        records.push(record(Phase::Gain, gain, grad.norm(), 0.0, None, 0.0));
                        iter += 1;
                        continue;
                    }
                    let f_g = fisher::gain_fisher_from(&snap).m;
                    let objective = |t: &Vector2<f64>| gain_value(mdp, t, s0).map_or(f64::NAN, |(g, _)| g);
                    let (next, alpha, outcome, jitter) = ascent_step(objective, &theta, gain, &grad, &f_g, cfg)?;
                    records.push(record(Phase::Gain, gain, grad.norm(), alpha, Some(outcome), jitter));
                    theta = next;
                }
                Some(gs) => {
                    let (grad_b, grad_g, f_b, f_g) = match sample_estimate(mdp, &snap, &cfg.mode, iter)? {
                        Some(est) => (est.grad_b, est.grad_g, est.fisher_b, est.fisher_g),
                        None => (
                            gradients::bias_gradient(mdp, &snap, s0)?,
                            gradients::gain_gradient(&snap),
                            bias_preconditioner(mdp, &snap, s0, cfg.bias_scheme)?,
                            fisher::gain_fisher_from(&snap).m,
                        ),
                    };
                    let be = barrier_combine(bias, gain, grad_b, grad_g, f_b, f_g, gs, beta, cfg.zeta)?;
                    let objective = |t: &Vector2<f64>| match gain_value(mdp, t, s0) {
                        Some((g, b)) if g - gs + cfg.zeta > 0.0 => b + beta * (g - gs + cfg.zeta).ln(),
                        _ => f64::NAN,
                    };
                    let (next, alpha, outcome, jitter) =
                        ascent_step(objective, &theta, be.value, &be.gradient, &be.precond, cfg)?;
                    records.push(record(
                        Phase::BiasBarrier,
                        be.value,
                        be.gradient.norm(),
                        alpha,
                        Some(outcome),
                        jitter,
                    ));
                    theta = next;
                }
            }
            iter += 1;
        }
        if g_star.is_some() {
            beta /= cfg.shrink;
        }
    }
    finish(mdp, theta, records, g_star)
}

fn finish(mdp: &MdpModel, theta: Vector2<f64>, records: Vec<IterRecord>, g_star: Option<f64>) -> Result<OptimTrace> {
    let final_params = PolicyParams::from_vector(theta);
    let (final_gain, final_bias) = eval::gain_and_bias(mdp, &final_params.tabular(mdp), mdp.initial_state())?;
    Ok(OptimTrace {
        records,
        final_params,
        final_gain,
        final_bias,
        g_star,
    })
}

/// Preconditioned ascent on the bias at the initial state, stopping when the
/// gradient norm falls below `cfg.tol` or after `cfg.max_iters` iterations.
pub fn optimize_bias_only(
    mdp: &MdpModel,
    params0: &PolicyParams,
    scheme: BiasScheme,
    cfg: &OptimConfig,
) -> Result<OptimTrace> {
    cfg.validate()?;
    if matches!(cfg.mode, Mode::Sampling { .. })
        && !matches!(scheme, BiasScheme::Identity | BiasScheme::FisherSampling(2))
    {
        return Err(Error::InvalidConfig(
            "sampling mode supports only the identity and two-step sampling Fisher schemes".into(),
        ));
    }
    let s0 = mdp.initial_state();
    let mut theta = params0.theta;
    let mut records = Vec::new();
    for iter in 0..cfg.max_iters {
        let snap = PolicySnapshot::new(mdp, PolicyParams::from_vector(theta))?;
        let bias = snap.bias_at(s0);
        let (grad, precond) = match sample_estimate(mdp, &snap, &cfg.mode, iter)? {
            Some(est) => {
                let c = match scheme {
                    BiasScheme::Identity => Matrix2::identity(),
                    _ => est.fisher_b,
                };
                (est.grad_b, c)
            }
            None => (
                gradients::bias_gradient(mdp, &snap, s0)?,
                bias_preconditioner(mdp, &snap, s0, scheme)?,
            ),
        };
        let mut rec = IterRecord {
            theta: [theta[0], theta[1]],
            phase: Phase::Bias,
            gain: snap.gain(),
            bias,
            objective: bias,
            grad_norm: grad.norm(),
            step: 0.0,
            outcome: None,
            jitter: 0.0,
        };
        if grad.norm() < cfg.tol {
            records.push(rec);
            break;
        }
        let objective = |t: &Vector2<f64>| gain_value(mdp, t, s0).map_or(f64::NAN, |(_, b)| b);
        let (next, alpha, outcome, jitter) = ascent_step(objective, &theta, bias, &grad, &precond, cfg)?;
        rec.step = alpha;
        rec.outcome = Some(outcome);
        rec.jitter = jitter;
        records.push(rec);
        theta = next;
    }
    finish(mdp, theta, records, None)
}

/// Ascent on `v_b − ½ φ ‖∇v_g‖²` with an identity preconditioner; the
/// penalty gradient uses the finite-difference gain Hessian.
pub fn optimize_penalty(mdp: &MdpModel, params0: &PolicyParams, phi: f64, cfg: &OptimConfig) -> Result<OptimTrace> {
    cfg.validate()?;
    if !(phi >= 0.0) {
        return Err(Error::InvalidConfig(format!("penalty parameter {phi} must be nonnegative")));
    }
    let s0 = mdp.initial_state();
    let penalized = |t: &Vector2<f64>| -> f64 {
        let p = PolicyParams::from_vector(*t);
        match PolicySnapshot::new(mdp, p) {
            Ok(snap) => snap.bias_at(s0) - 0.5 * phi * gradients::gain_gradient(&snap).norm_squared(),
            Err(_) => f64::NAN,
        }
    };
    let mut theta = params0.theta;
    let mut records = Vec::new();
    for _ in 0..cfg.max_iters {
        let params = PolicyParams::from_vector(theta);
        let snap = PolicySnapshot::new(mdp, params)?;
        let grad_g = gradients::gain_gradient(&snap);
        let mut grad = gradients::bias_gradient(mdp, &snap, s0)?;
        if phi != 0.0 {
            let h_g = gradients::hessian_fd(Objective::Gain, mdp, &params, FD_HESSIAN_STEP)?;
            grad -= h_g.transpose() * grad_g * phi;
        }
        let value = snap.bias_at(s0) - 0.5 * phi * grad_g.norm_squared();
        let mut rec = IterRecord {
            theta: [theta[0], theta[1]],
            phase: Phase::Penalty,
            gain: snap.gain(),
            bias: snap.bias_at(s0),
            objective: value,
            grad_norm: grad.norm(),
            step: 0.0,
            outcome: None,
            jitter: 0.0,
        };
        if grad.norm() < cfg.tol {
            records.push(rec);
            break;
        }
        let (next, alpha, outcome, jitter) = ascent_step(penalized, &theta, value, &grad, &Matrix2::identity(), cfg)?;
        rec.step = alpha;
        rec.outcome = Some(outcome);
        rec.jitter = jitter;
        records.push(rec);
        theta = next;
    }
    finish(mdp, theta, records, None)
}

/// Natural ascent on the scaled discounted value `(1−γ) v_γ(θ, s0)`.
pub fn optimize_discounted(mdp: &MdpModel, params0: &PolicyParams, gamma: f64, cfg: &OptimConfig) -> Result<OptimTrace> {
    cfg.validate()?;
    let s0 = mdp.initial_state();
    let scaled = |t: &Vector2<f64>| -> f64 {
        let policy = PolicyParams::from_vector(*t).tabular(mdp);
        eval::discounted_value(mdp, &policy, gamma).map_or(f64::NAN, |d| d.scaled_v[s0])
    };
    let mut theta = params0.theta;
    let mut records = Vec::new();
    for _ in 0..cfg.max_iters {
        let params = PolicyParams::from_vector(theta);
        let value = eval::discounted_value(mdp, &params.tabular(mdp), gamma)?.scaled_v[s0];
        let grad = gradients::discounted_gradient_exact(mdp, &params, s0, gamma)?;
        let (gain, bias) = eval::gain_and_bias(mdp, &params.tabular(mdp), s0)?;
        let mut rec = IterRecord {
            theta: [theta[0], theta[1]],
            phase: Phase::Discounted,
            gain,
            bias,
            objective: value,
            grad_norm: grad.norm(),
            step: 0.0,
            outcome: None,
            jitter: 0.0,
        };
        if grad.norm() < cfg.tol {
            records.push(rec);
            break;
        }
        let precond = fisher::discounted_fisher(mdp, &params, s0, gamma)?.m;
        let (next, alpha, outcome, jitter) = ascent_step(scaled, &theta, value, &grad, &precond, cfg)?;
        rec.step = alpha;
        rec.outcome = Some(outcome);
        rec.jitter = jitter;
        records.push(rec);
        theta = next;
    }
    finish(mdp, theta, records, None)
}

//! Fisher information matrices used as preconditioners, and the
//! positive-definiteness repair applied before every solve.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::eval::{self, PolicySnapshot};
use crate::mdp::{ChainAnalysis, MdpModel};
use crate::policy::PolicyParams;

/// First nonzero rung of the jitter ladder.
pub const DEFAULT_JITTER: f64 = 1e-3;
/// Jitter above which repair gives up.
pub const MAX_JITTER: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FisherKind {
    Action,
    Gain,
    BiasAnalytic,
    /// Sampling-enabler bias Fisher with the given absorption horizon.
    BiasSampling(usize),
    Devmat,
    Trajectory(usize),
    Discounted(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherMatrix {
    pub m: Matrix2<f64>,
    pub kind: FisherKind,
}

impl FisherMatrix {
    fn new(m: Matrix2<f64>, kind: FisherKind) -> Self {
        // symmetrise away accumulation roundoff
        Self {
            m: (m + m.transpose()) * 0.5,
            kind,
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.m.symmetric_eigenvalues().min()
    }
}

pub fn action_fisher(params: &PolicyParams, s: usize) -> FisherMatrix {
    FisherMatrix::new(params.action_fisher(s), FisherKind::Action)
}

/// `Σ_s w(s) F_a(s)`.
fn weighted(params: &PolicyParams, weights: impl Iterator<Item = f64>) -> Matrix2<f64> {
    weights
        .enumerate()
        .filter(|(_, w)| *w != 0.0)
        .map(|(s, w)| params.action_fisher(s) * w)
        .sum()
}

pub fn gain_fisher_from(snap: &PolicySnapshot) -> FisherMatrix {
    let m = weighted(&snap.params, snap.chain().p_star.iter().copied());
    FisherMatrix::new(m, FisherKind::Gain)
}

pub fn gain_fisher(mdp: &MdpModel, params: &PolicyParams) -> Result<FisherMatrix> {
    Ok(gain_fisher_from(&PolicySnapshot::new(mdp, *params)?))
}

fn mixing_time(chain: &ChainAnalysis, s0: usize) -> Result<usize> {
    if s0 == chain.initial_state {
        Ok(chain.t_mix)
    } else {
        chain.mixing_time_from(s0)
    }
}

/// `Σ_{t=0}^{t_mix} Σ_s |pᵗ(s|s0) − p*(s)| F_a(s)`; later weights are below
/// the mixing tolerance.
pub fn bias_fisher_analytic_from(snap: &PolicySnapshot, s0: usize) -> Result<FisherMatrix> {
    let t_mix = mixing_time(snap.chain(), s0)?;
    Ok(bias_fisher_analytic_horizon(snap, s0, t_mix))
}

/// The same weighted sum truncated after step `horizon`.
pub fn bias_fisher_analytic_horizon(snap: &PolicySnapshot, s0: usize, horizon: usize) -> FisherMatrix {
    let chain = snap.chain();
    let m = chain
        .distributions_from(s0)
        .take(horizon + 1)
        .map(|d| {
            let w = d.iter().zip(chain.p_star.iter()).map(|(pt, ps)| (pt - ps).abs());
            weighted(&snap.params, w)
        })
        .sum();
    FisherMatrix::new(m, FisherKind::BiasAnalytic)
}

pub fn bias_fisher_analytic(mdp: &MdpModel, params: &PolicyParams, s0: usize) -> Result<FisherMatrix> {
    bias_fisher_analytic_from(&PolicySnapshot::new(mdp, *params)?, s0)
}

/// `Σ_{t<t̂} Σ_s pᵗ(s|s0) F_a(s) + t̂ · F_g`.
pub fn bias_fisher_sampling_from(snap: &PolicySnapshot, s0: usize, t_abs_hat: usize) -> Result<FisherMatrix> {
    if t_abs_hat == 0 {
        return Err(Error::InvalidConfig("absorption horizon must be at least 1".into()));
    }
    let transient = trajectory_matrix(snap, s0, t_abs_hat);
    let m = transient + gain_fisher_from(snap).m * t_abs_hat as f64;
    Ok(FisherMatrix::new(m, FisherKind::BiasSampling(t_abs_hat)))
}

pub fn bias_fisher_sampling_enabler(
    mdp: &MdpModel,
    params: &PolicyParams,
    s0: usize,
    t_abs_hat: usize,
) -> Result<FisherMatrix> {
    bias_fisher_sampling_from(&PolicySnapshot::new(mdp, *params)?, s0, t_abs_hat)
}

/// `Σ_s |D[s0, s]| F_a(s)`.
pub fn devmat_fisher_from(snap: &PolicySnapshot, s0: usize) -> FisherMatrix {
    let row = snap.chain().deviation.row(s0);
    let m = weighted(&snap.params, row.iter().map(|d| d.abs()));
    FisherMatrix::new(m, FisherKind::Devmat)
}

pub fn devmat_fisher(mdp: &MdpModel, params: &PolicyParams, s0: usize) -> Result<FisherMatrix> {
    Ok(devmat_fisher_from(&PolicySnapshot::new(mdp, *params)?, s0))
}

fn trajectory_matrix(snap: &PolicySnapshot, s0: usize, len: usize) -> Matrix2<f64> {
    snap.chain()
        .distributions_from(s0)
        .take(len)
        .map(|d| weighted(&snap.params, d.iter().copied()))
        .sum()
}

/// `Σ_{t<len} Σ_s pᵗ(s|s0) F_a(s)`.
pub fn trajectory_fisher(mdp: &MdpModel, params: &PolicyParams, s0: usize, len: usize) -> Result<FisherMatrix> {
    let snap = PolicySnapshot::new(mdp, *params)?;
    Ok(FisherMatrix::new(trajectory_matrix(&snap, s0, len), FisherKind::Trajectory(len)))
}

/// `Σ_s (1−γ) p_γ(s|s0) F_a(s)` with `p_γ` the row of `(I − γP)⁻¹`.
pub fn discounted_fisher(mdp: &MdpModel, params: &PolicyParams, s0: usize, gamma: f64) -> Result<FisherMatrix> {
    let d = eval::discounted_value(mdp, &params.tabular(mdp), gamma)?;
    let row = d.resolvent.row(s0);
    let m = weighted(params, row.iter().map(|p| (1.0 - gamma) * p));
    Ok(FisherMatrix::new(m, FisherKind::Discounted(gamma)))
}

/// Adds the smallest `e ∈ {0, jitter0, 10·jitter0, ...}` to the diagonal
/// that makes `m` pass a Cholesky factorisation. Returns the repaired
/// matrix and `e`.
pub fn ensure_positive_definite(m: &Matrix2<f64>, jitter0: f64) -> Result<(Matrix2<f64>, f64)> {
    if !(jitter0 > 0.0) || m.iter().any(|x| !x.is_finite()) {
        return Err(Error::PositiveDefiniteRepair(MAX_JITTER));
    }
    let mut e = 0.0;
    loop {
        let candidate = m + Matrix2::identity() * e;
        if candidate.cholesky().is_some() {
            return Ok((candidate, e));
        }
        e = if e == 0.0 { jitter0 } else { e * 10.0 };
        if e > MAX_JITTER {
            return Err(Error::PositiveDefiniteRepair(MAX_JITTER));
        }
    }
}

/// Solves `C d = g` after repairing `C`.
pub fn precondition(c: &Matrix2<f64>, g: &Vector2<f64>, jitter0: f64) -> Result<Vector2<f64>> {
    let (repaired, _) = ensure_positive_definite(c, jitter0)?;
    let chol = repaired
        .cholesky()
        .ok_or(Error::PositiveDefiniteRepair(MAX_JITTER))?;
    Ok(chol.solve(g))
}

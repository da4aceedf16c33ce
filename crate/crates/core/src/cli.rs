//! Experiment harness behind the `nbw` binary: grid sweeps, verification
//! suites, gradient-decomposition diagnostics and barrier-parameter tuning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{self, EnvCatalogEntry};
use crate::error::{Error, Result};
use crate::eval::PolicySnapshot;
use crate::fisher;
use crate::gradients::{self, Objective, FD_GRAD_STEP};
use crate::mdp::{self, MdpModel};
use crate::optimizer::{self, BiasScheme, Mode, OptimConfig};
use crate::policy::PolicyParams;
use crate::sampling::{self, EpisodeConfig, DEFAULT_N_XEP, MIXING_MARGIN};

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "NBW_SEED";

pub const DEFAULT_BETA0_LIST: [f64; 7] = [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0];

/// Evenly spaced starting values shared by both policy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { min: -10.0, max: 10.0, step: 0.5 }
    }
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidConfig(format!("grid `{text}` is not min,max,step")))?;
        let [min, max, step] = parts[..] else {
            return Err(Error::InvalidConfig(format!("grid `{text}` is not min,max,step")));
        };
        let spec = Self { min, max, step };
        spec.points()?;
        Ok(spec)
    }

    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.max >= self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::InvalidConfig(format!("invalid grid {self:?}")));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| self.min + i as f64 * self.step).collect())
    }

    /// Row-major `(θ₀, θ₁)` pairs with `θ₀` the slow index.
    pub fn cells(&self) -> Result<Vec<(f64, f64)>> {
        let pts = self.points()?;
        Ok(pts.iter().flat_map(|&a| pts.iter().map(move |&b| (a, b))).collect())
    }
}

/// Optimization method run from each grid start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nbw,
    BiasOnly(BiasScheme),
    Discounted(f64),
    Penalty(f64),
}

impl Method {
    /// Parses `nbw`, `bias_only[:scheme]`, `discounted[:gamma]` or
    /// `penalty[:phi]`; missing values come from `gamma` and `phi`.
    pub fn parse(text: &str, gamma: Option<f64>, phi: Option<f64>) -> Result<Self> {
        let mut parts = text.splitn(2, ':');
        let head = parts.next().unwrap_or_default();
        let arg = parts.next();
        let number = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("`{s}` is not a number in method `{text}`")))
        };
        match head {
            "nbw" => Ok(Method::Nbw),
            "bias_only" => Ok(Method::BiasOnly(parse_scheme(arg.unwrap_or("fisher_sampling"))?)),
            "discounted" => {
                let g = match arg {
                    Some(s) => number(s)?,
                    None => gamma.ok_or_else(|| Error::InvalidConfig("discounted method needs --gamma".into()))?,
                };
                Ok(Method::Discounted(g))
            }
            "penalty" => {
                let p = match arg {
                    Some(s) => number(s)?,
                    None => phi.ok_or_else(|| Error::InvalidConfig("penalty method needs --phi".into()))?,
                };
                Ok(Method::Penalty(p))
            }
            _ => Err(Error::InvalidConfig(format!("unknown method `{text}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Method::Nbw => "nbw".into(),
            Method::BiasOnly(s) => format!("bias_only:{}", scheme_label(s)),
            Method::Discounted(g) => format!("discounted:{g}"),
            Method::Penalty(p) => format!("penalty:{p}"),
        }
    }

    pub fn run(&self, mdp: &MdpModel, params0: &PolicyParams, cfg: &OptimConfig) -> Result<optimizer::OptimTrace> {
        match *self {
            Method::Nbw => optimizer::optimize_nbw(mdp, params0, cfg),
            Method::BiasOnly(scheme) => optimizer::optimize_bias_only(mdp, params0, scheme, cfg),
            Method::Discounted(g) => optimizer::optimize_discounted(mdp, params0, g, cfg),
            Method::Penalty(p) => optimizer::optimize_penalty(mdp, params0, p, cfg),
        }
    }
}

fn parse_scheme(text: &str) -> Result<BiasScheme> {
    let mut parts = text.splitn(2, ':');
    let name = parts.next().unwrap_or_default();
    let arg = parts.next();
    match (name, arg) {
        ("identity", None) => Ok(BiasScheme::Identity),
        ("hessian", None) => Ok(BiasScheme::Hessian),
        ("fisher_analytic", None) => Ok(BiasScheme::FisherAnalytic),
        ("devmat", None) => Ok(BiasScheme::Devmat),
        ("fisher_sampling", None) => Ok(BiasScheme::FisherSampling(2)),
        ("fisher_sampling", Some(t)) => match t.parse::<usize>() {
            Ok(t) if t >= 1 => Ok(BiasScheme::FisherSampling(t)),
            _ => Err(Error::InvalidConfig(format!("bad absorption horizon `{t}`"))),
        },
        _ => Err(Error::InvalidConfig(format!("unknown bias scheme `{text}`"))),
    }
}

fn scheme_label(s: &BiasScheme) -> String {
    match s {
        BiasScheme::Identity => "identity".into(),
        BiasScheme::Hessian => "hessian".into(),
        BiasScheme::FisherAnalytic => "fisher_analytic".into(),
        BiasScheme::FisherSampling(t) => format!("fisher_sampling:{t}"),
        BiasScheme::Devmat => "devmat".into(),
    }
}

/// Rounds to 9 significant digits, the precision written to CSV.
pub fn quantize(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub theta0: f64,
    pub theta1: f64,
    pub final_gain: f64,
    pub final_bias: f64,
    pub abs_bias_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub env: String,
    pub method: String,
    pub mode: String,
    pub seed: u64,
    pub beta0: f64,
    pub grid: GridSpec,
    pub n_cells: usize,
    /// Bias of the nearly Blackwell optimal deterministic policy.
    pub reference_bias: f64,
    pub mean_abs_bias_diff: f64,
    /// Population standard deviation.
    pub std_abs_bias_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResultGrid {
    pub summary: SweepSummary,
    pub cells: Vec<SweepCell>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SweepResultGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta0,theta1,final_gain,final_bias,abs_bias_diff\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.theta0, c.theta1, c.final_gain, c.final_bias, c.abs_bias_diff
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    /// Writes `<out>` (CSV) and `<out>` with a `.json` extension (summary).
    pub fn write(&self, out: &Path) -> Result<()> {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(out, self.to_csv())?;
        fs::write(out.with_extension("json"), self.summary_json())?;
        Ok(())
    }
}

/// Parses a sweep CSV back into cells.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepCell>> {
    let mut lines = text.lines();
    if lines.next() != Some("theta0,theta1,final_gain,final_bias,abs_bias_diff") {
        return Err(Error::InvalidConfig("unexpected CSV header".into()));
    }
    lines
        .map(|line| {
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidConfig(format!("bad CSV row `{line}`")))?;
            let [theta0, theta1, final_gain, final_bias, abs_bias_diff] = v[..] else {
                return Err(Error::InvalidConfig(format!("bad CSV row `{line}`")));
            };
            Ok(SweepCell { theta0, theta1, final_gain, final_bias, abs_bias_diff })
        })
        .collect()
}

/// Per-cell configuration: sampling runs get their own seed per start.
fn cell_config(cfg: &OptimConfig, index: usize) -> OptimConfig {
    let mut c = *cfg;
    if let Mode::Sampling { n_xep, t_xepmax, seed } = cfg.mode {
        c.mode = Mode::Sampling {
            n_xep,
            t_xepmax,
            seed: sampling::episode_seed(seed, index as u64),
        };
    }
    c
}

/// Largest mixing time over the grid starts, plus the standard margin.
pub fn grid_episode_length(mdp: &MdpModel, grid: &GridSpec) -> Result<usize> {
    let cells = grid.cells()?;
    let worst = cells
        .par_iter()
        .map(|&(a, b)| mdp::induced_chain(mdp, &PolicyParams::new(a, b).tabular(mdp)).map(|c| c.t_mix))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap_or(0);
    Ok(worst + MIXING_MARGIN)
}

/// Runs `method` from every grid start.
pub fn run_sweep(
    entry: &EnvCatalogEntry,
    method: Method,
    cfg: &OptimConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<SweepResultGrid> {
    let mdp = &entry.mdp;
    let reference = envs::enumerate_deterministic(mdp)?.nbw_bias;
    let mut cfg = *cfg;
    if let Mode::Sampling { n_xep, t_xepmax: None, .. } = cfg.mode {
        cfg.mode = Mode::Sampling {
            n_xep,
            t_xepmax: Some(grid_episode_length(mdp, grid)?),
            seed,
        };
    }
    let cells = grid
        .cells()?
        .into_par_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let trace = method
                .run(mdp, &PolicyParams::new(a, b), &cell_config(&cfg, i))
                .map_err(|e| Error::InvalidConfig(format!("start ({a}, {b}): {e}")))?;
            Ok(SweepCell {
                theta0: a,
                theta1: b,
                final_gain: quantize(trace.final_gain),
                final_bias: quantize(trace.final_bias),
                abs_bias_diff: quantize((reference - trace.final_bias).abs()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let diffs: Vec<f64> = cells.iter().map(|c| c.abs_bias_diff).collect();
    let (mean, std) = mean_std(&diffs);
    let mode = match cfg.mode {
        Mode::Exact => "exact",
        Mode::Sampling { .. } => "sampling",
    };
    Ok(SweepResultGrid {
        summary: SweepSummary {
            env: entry.name.clone(),
            method: method.label(),
            mode: mode.into(),
            seed,
            beta0: cfg.beta0,
            grid: *grid,
            n_cells: cells.len(),
            reference_bias: reference,
            mean_abs_bias_diff: mean,
            std_abs_bias_diff: std,
        },
        cells,
    })
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub measured: f64,
    pub tol: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    /// Passes when `measured ≤ tol`.
    pub fn at_most(name: impl Into<String>, measured: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tol,
            passed: measured <= tol,
            detail: String::new(),
        }
    }

    fn failed(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            measured: f64::NAN,
            tol: f64::NAN,
            passed: false,
            detail: detail.into(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn render(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut line = format!("{status} {} measured={:e} tol={:e}", self.name, self.measured, self.tol);
        if !self.detail.is_empty() {
            line.push_str(" (");
            line.push_str(&self.detail);
            line.push(')');
        }
        line
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    EnvTables,
    Gradients,
    Fishers,
    Estimators,
    All,
}

/// Uniform random draws of θ in `[-5, 5]²`.
fn random_params(rng: &mut Xoshiro256PlusPlus) -> PolicyParams {
    PolicyParams::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))
}

fn entry_checks<T>(name: &str, r: Result<T>, f: impl FnOnce(T) -> Vec<CheckLine>) -> Vec<CheckLine> {
    match r {
        Ok(v) => f(v),
        Err(e) => vec![CheckLine::failed(name, e.to_string())],
    }
}

pub fn verify_env_tables(entries: &[EnvCatalogEntry]) -> Vec<CheckLine> {
    let mut out = Vec::new();
    for e in entries {
        let tag = match e.provenance {
            envs::Provenance::Full => "",
            envs::Provenance::Reconstructed => " reconstructed",
        };
        out.extend(entry_checks(&format!("env_tables/{}/enumerate", e.name), envs::enumerate_deterministic(&e.mdp), |t| {
            match &e.expected_stats {
                Some(stats) => envs::check_stats(&t, stats)
                    .into_iter()
                    .map(|c| CheckLine {
                        name: format!("env_tables/{}/{}", e.name, c.name),
                        measured: (c.measured - c.expected).abs(),
                        tol: c.tol,
                        passed: c.passed,
                        detail: format!("expected {} got {}{tag}", c.expected, c.measured),
                    })
                    .collect(),
                None => vec![CheckLine::at_most(format!("env_tables/{}/enumerate", e.name), 0.0, 0.0)
                    .with_detail(format!("{} deterministic policies evaluated", t.rows.len()))],
            }
        }));
    }
    out
}

/// Worst relative error of the exact bias gradient against central
/// differences, and worst disagreement of the two post-mixing forms.
pub fn verify_gradients(entries: &[EnvCatalogEntry], draws: usize, seed: u64) -> Vec<CheckLine> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut worst_rel: f64 = 0.0;
    let mut worst_post: f64 = 0.0;
    let mut worst_gain: f64 = 0.0;
    let mut errors = Vec::new();
    for i in 0..draws {
        let e = &entries[i % entries.len()];
        let p = random_params(&mut rng);
        let run = || -> Result<(f64, f64, f64)> {
            let mdp = &e.mdp;
            let s0 = mdp.initial_state();
            let exact = gradients::bias_gradient_thm1(mdp, &p, s0)?;
            let fd = gradients::fd_gradient(|q| Objective::Bias { s0 }.value(mdp, q), &p, FD_GRAD_STEP)?;
            let rel = (exact.total - fd).amax() / fd.amax().max(f64::MIN_POSITIVE);
            let post = (gradients::postmix_q1(mdp, &p)? - gradients::postmix_qb(mdp, &p, FD_GRAD_STEP)?).amax();
            let fd_g = gradients::fd_gradient(|q| Objective::Gain.value(mdp, q), &p, FD_GRAD_STEP)?;
            let gain = (exact.gain_grad - fd_g).amax();
            Ok((rel, post, gain))
        };
        match run() {
            Ok((rel, post, gain)) => {
                worst_rel = worst_rel.max(rel);
                worst_post = worst_post.max(post);
                worst_gain = worst_gain.max(gain);
            }
            Err(err) => errors.push(format!("{} {:?}: {err}", e.name, p.theta.as_slice())),
        }
    }
    let mut out = vec![
        CheckLine::at_most("gradients/bias_vs_fd_rel", worst_rel, 1e-5),
        CheckLine::at_most("gradients/postmix_forms", worst_post, 1e-6),
        CheckLine::at_most("gradients/gain_vs_fd", worst_gain, 1e-5),
    ];
    if !errors.is_empty() {
        out.push(CheckLine::failed("gradients/evaluation", errors.join("; ")));
    }
    out
}

/// Symmetry and positive semidefiniteness of every Fisher variant, plus the
/// long-trajectory and near-one-discount limits.
pub fn verify_fishers(entries: &[EnvCatalogEntry], draws: usize, seed: u64) -> Vec<CheckLine> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut min_eig = f64::INFINITY;
    let mut max_asym: f64 = 0.0;
    let mut errors = Vec::new();
    for i in 0..draws {
        let e = &entries[i % entries.len()];
        let p = random_params(&mut rng);
        let run = || -> Result<Vec<fisher::FisherMatrix>> {
            let mdp = &e.mdp;
            let s0 = mdp.initial_state();
            let snap = PolicySnapshot::new(mdp, p)?;
            let mut all = vec![
                fisher::action_fisher(&p, s0),
                fisher::gain_fisher_from(&snap),
                fisher::bias_fisher_analytic_from(&snap, s0)?,
                fisher::devmat_fisher_from(&snap, s0),
                fisher::trajectory_fisher(mdp, &p, s0, 1 + i % 7)?,
                fisher::discounted_fisher(mdp, &p, s0, 0.9)?,
            ];
            for t in 1..=5 {
                all.push(fisher::bias_fisher_sampling_from(&snap, s0, t)?);
            }
            Ok(all)
        };
        match run() {
            Ok(all) => {
                for f in all {
                    min_eig = min_eig.min(f.min_eigenvalue());
                    max_asym = max_asym.max((f.m - f.m.transpose()).amax());
                }
            }
            Err(err) => errors.push(format!("{} {:?}: {err}", e.name, p.theta.as_slice())),
        }
    }
    let mut cesaro: f64 = 0.0;
    let mut discounted: f64 = 0.0;
    for e in entries {
        let p = PolicyParams::new(0.3, -0.2);
        let s0 = e.mdp.initial_state();
        let run = || -> Result<(f64, f64)> {
            let snap = PolicySnapshot::new(&e.mdp, p)?;
            let f_g = fisher::gain_fisher_from(&snap).m;
            let len = snap.chain().t_mix + 10_000;
            let traj = fisher::trajectory_fisher(&e.mdp, &p, s0, len)?.m / len as f64;
            let disc = fisher::discounted_fisher(&e.mdp, &p, s0, 0.99999)?.m;
            Ok(((traj - f_g).amax(), (disc - f_g).amax()))
        };
        match run() {
            Ok((c, d)) => {
                cesaro = cesaro.max(c);
                discounted = discounted.max(d);
            }
            Err(err) => errors.push(format!("{}: {err}", e.name)),
        }
    }
    let mut out = vec![
        CheckLine::at_most("fishers/min_eigenvalue", -min_eig, 1e-10),
        CheckLine::at_most("fishers/asymmetry", max_asym, 1e-12),
        CheckLine::at_most("fishers/trajectory_average_limit", cesaro, 1e-4),
        CheckLine::at_most("fishers/discounted_limit", discounted, 1e-3),
    ];
    if !errors.is_empty() {
        out.push(CheckLine::failed("fishers/evaluation", errors.join("; ")));
    }
    out
}

/// Worst z-score of the four estimator means against their exact targets.
pub fn estimator_z_scores(mdp: &MdpModel, params: &PolicyParams, n_xep: usize, seed: u64) -> Result<[f64; 4]> {
    let snap = PolicySnapshot::new(mdp, *params)?;
    let s0 = mdp.initial_state();
    let cfg = EpisodeConfig::new(n_xep, snap.chain().t_mix + MIXING_MARGIN, seed);
    let est = sampling::estimate(mdp, &snap, &cfg)?;
    let exact_g = gradients::gain_gradient(&snap);
    let exact_b = gradients::bias_gradient(mdp, &snap, s0)?;
    let exact_fg = fisher::gain_fisher_from(&snap).m;
    let exact_fb = fisher::bias_fisher_sampling_from(&snap, s0, 2)?.m;
    let z = |diff: f64, se: f64| {
        if se == 0.0 {
            if diff.abs() <= 1e-12 { 0.0 } else { f64::INFINITY }
        } else {
            diff.abs() / se
        }
    };
    let zv = |m: Vector2<f64>, x: Vector2<f64>, se: Vector2<f64>| (0..2).map(|k| z(m[k] - x[k], se[k])).fold(0.0, f64::max);
    let zm = |m: nalgebra::Matrix2<f64>, x: nalgebra::Matrix2<f64>, se: nalgebra::Matrix2<f64>| {
        (0..4).map(|k| z(m[k] - x[k], se[k])).fold(0.0, f64::max)
    };
    Ok([
        zv(est.grad_g, exact_g, est.se_grad_g()),
        zv(est.grad_b, exact_b, est.se_grad_b()),
        zm(est.fisher_g, exact_fg, est.se_fisher_g()),
        zm(est.fisher_b, exact_fb, est.se_fisher_b()),
    ])
}

pub fn verify_estimators(entries: &[EnvCatalogEntry], n_xep: usize, seed: u64) -> Vec<CheckLine> {
    let labels = ["grad_g", "grad_b", "fisher_g", "fisher_b"];
    let mut out = Vec::new();
    for e in entries {
        let name = format!("estimators/{}", e.name);
        out.extend(entry_checks(&name, estimator_z_scores(&e.mdp, &PolicyParams::new(0.0, 0.0), n_xep, seed), |zs| {
            zs.iter()
                .zip(labels)
                .map(|(z, l)| CheckLine::at_most(format!("{name}/{l}_z"), *z, 3.0))
                .collect()
        }));
    }
    out
}

/// Partial-sum error curves of the bias-gradient decomposition for one θ,
/// as CSV `t,angular_error,norm_error`.
pub fn diagnose_single(mdp: &MdpModel, params: &PolicyParams) -> Result<String> {
    let r = gradients::decomposition_diagnostic(mdp, params, mdp.initial_state())?;
    let mut out = String::from("t,angular_error,norm_error\n");
    for e in &r.entries {
        writeln!(out, "{},{},{}", e.t, quantize(e.angular_error), quantize(e.norm_error)).expect("writing to a String");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingGroupSummary {
    pub env: String,
    pub n_policies: usize,
    /// Group size per mixing time.
    pub groups: BTreeMap<usize, usize>,
    pub most_common_t_mix: usize,
}

fn mean_std_finite(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (finite, nan): (Vec<f64>, Vec<f64>) = values.partition(|v| v.is_finite());
    if finite.is_empty() {
        return (f64::NAN, f64::NAN, nan.len());
    }
    let (m, s) = mean_std(&finite);
    (m, s, nan.len())
}

/// Decomposition errors over a grid of θ grouped by mixing time. Returns
/// the CSV of per-group mean and standard deviation curves and a summary.
pub fn diagnose_by_mixing_time(entry: &EnvCatalogEntry, grid: &GridSpec) -> Result<(String, MixingGroupSummary)> {
    let mdp = &entry.mdp;
    let s0 = mdp.initial_state();
    let reports = grid
        .cells()?
        .into_par_iter()
        .map(|(a, b)| gradients::decomposition_diagnostic(mdp, &PolicyParams::new(a, b), s0))
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<usize, Vec<&gradients::DecompositionReport>> = BTreeMap::new();
    for r in &reports {
        groups.entry(r.t_mix).or_default().push(r);
    }
    let mut csv = String::from(
        "t_mix,group_size,kind,t,mean_angular_error,std_angular_error,mean_norm_error,std_norm_error,n_undefined_angle\n",
    );
    for (t_mix, members) in &groups {
        let mut row = |kind: &str, t: usize, pick: &dyn Fn(&gradients::DecompositionReport) -> gradients::DecompositionEntry| {
            let (ma, sa, nan) = mean_std_finite(members.iter().map(|r| pick(r).angular_error));
            let (mn, sn, _) = mean_std_finite(members.iter().map(|r| pick(r).norm_error));
            writeln!(
                csv,
                "{t_mix},{},{kind},{t},{},{},{},{},{nan}",
                members.len(),
                quantize(ma),
                quantize(sa),
                quantize(mn),
                quantize(sn)
            )
            .expect("writing to a String");
        };
        for t in 0..=*t_mix {
            row("partial_sum", t, &|r| r.entries[t]);
        }
        row("postmix_only", *t_mix, &|r| r.postmix_only);
    }
    let sizes: BTreeMap<usize, usize> = groups.iter().map(|(k, v)| (*k, v.len())).collect();
    let most_common = sizes
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(k, _)| *k)
        .unwrap_or(0);
    Ok((
        csv,
        MixingGroupSummary {
            env: entry.name.clone(),
            n_policies: reports.len(),
            groups: sizes,
            most_common_t_mix: most_common,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    pub beta0: f64,
    pub mean_abs_bias_diff: f64,
    pub std_abs_bias_diff: f64,
}

pub fn parse_float_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::InvalidConfig(format!("`{s}` is not a number"))))
        .collect()
}

/// One nbw sweep per barrier parameter.
pub fn tune_beta0(
    entry: &EnvCatalogEntry,
    betas: &[f64],
    cfg: &OptimConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<Vec<SweepResultGrid>> {
    if betas.is_empty() {
        return Err(Error::InvalidConfig("the beta0 list is empty".into()));
    }
    betas
        .iter()
        .map(|&b| run_sweep(entry, Method::Nbw, &OptimConfig { beta0: b, ..*cfg }, grid, seed))
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "nbw", version, about = "Gain-then-bias policy gradient experiments on small unichain MDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an optimizer from every start of a parameter grid.
    Sweep(SweepArgs),
    /// Run verification suites and report each check.
    Verify(VerifyArgs),
    /// Error curves of the gradual bias-gradient summation.
    Diagnose(DiagnoseArgs),
    /// Repeat the nbw sweep for several initial barrier parameters.
    #[command(name = "tune-beta0")]
    TuneBeta0(TuneArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Exact,
    Sampling,
}

/// Options shared by sweep-like commands; each may also come from a JSON
/// config file, which command-line flags override.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Built-in environment name or path to an environment JSON file.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta0: Option<f64>,
    /// Grid as `min,max,step`.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Episodes per estimate in sampling mode.
    #[arg(long)]
    pub n_xep: Option<usize>,
}

impl RunOptions {
    /// Fields set in `self` win over those in `base`.
    fn over(self, base: RunOptions) -> RunOptions {
        RunOptions {
            env: self.env.or(base.env),
            mode: self.mode.or(base.mode),
            seed: self.seed.or(base.seed),
            beta0: self.beta0.or(base.beta0),
            grid: self.grid.or(base.grid),
            n_xep: self.n_xep.or(base.n_xep),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub run: RunOptions,
    /// nbw, bias_only[:scheme], discounted[:gamma] or penalty[:phi].
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    /// CSV output path; the JSON summary goes next to it. Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with default values for any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    /// Environments to check; built-ins when omitted.
    #[arg(long)]
    pub env: Vec<String>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Random parameter draws for the gradient suite.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub env: String,
    /// Single parameter as `theta0,theta1`.
    #[arg(long, conflicts_with = "by_mixing_time", allow_hyphen_values = true)]
    pub theta: Option<String>,
    /// Scan a grid and group policies by mixing time.
    #[arg(long)]
    pub by_mixing_time: bool,
    /// Grid for the grouped scan, `min,max,step`.
    #[arg(long, default_value = "-10,10,0.1", allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub run: RunOptions,
    /// Comma-separated barrier parameters.
    #[arg(long)]
    pub betas: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

/// Resolved settings of a sweep-like command.
struct Resolved {
    entry: EnvCatalogEntry,
    cfg: OptimConfig,
    grid: GridSpec,
    seed: u64,
}

fn resolve(run: &RunOptions) -> Result<Resolved> {
    let env = run.env.as_deref().ok_or_else(|| Error::InvalidConfig("--env is required".into()))?;
    let entry = envs::resolve(env)?;
    let seed = run.seed.unwrap_or(0);
    let mode = match run.mode.unwrap_or(ModeArg::Exact) {
        ModeArg::Exact => Mode::Exact,
        ModeArg::Sampling => Mode::Sampling {
            n_xep: run.n_xep.unwrap_or(DEFAULT_N_XEP),
            t_xepmax: None,
            seed,
        },
    };
    let cfg = OptimConfig {
        beta0: run.beta0.unwrap_or(entry.default_beta0),
        mode,
        ..OptimConfig::default()
    };
    cfg.validate()?;
    let grid = match &run.grid {
        Some(g) => GridSpec::parse(g)?,
        None => GridSpec::default(),
    };
    Ok(Resolved { entry, cfg, grid, seed })
}

pub fn cmd_sweep(args: SweepArgs) -> Result<SweepResultGrid> {
    let file: SweepArgs = read_config(&args.config)?;
    let args = SweepArgs {
        run: args.run.over(file.run),
        method: args.method.or(file.method),
        gamma: args.gamma.or(file.gamma),
        phi: args.phi.or(file.phi),
        out: args.out.or(file.out),
        config: None,
    };
    let r = resolve(&args.run)?;
    let method = Method::parse(args.method.as_deref().unwrap_or("nbw"), args.gamma, args.phi)?;
    let result = run_sweep(&r.entry, method, &r.cfg, &r.grid, r.seed)?;
    match &args.out {
        Some(path) => result.write(path)?,
        None => print!("{}", result.to_csv()),
    }
    Ok(result)
}

/// Runs the selected suites; the returned lines carry pass/fail status.
pub fn cmd_verify(args: &VerifyArgs) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    let mut entries = Vec::new();
    if args.env.is_empty() {
        entries.extend(envs::BUILTIN_NAMES.iter().map(|n| envs::builtin(n).expect("built-in exists")));
    }
    for name in &args.env {
        match envs::resolve(name) {
            Ok(e) => entries.push(e),
            Err(e) => lines.push(CheckLine::failed(format!("load/{name}"), e.to_string())),
        }
    }
    if entries.is_empty() {
        return lines;
    }
    let run = |s: Suite| args.suite == Suite::All || args.suite == s;
    if run(Suite::EnvTables) {
        lines.extend(verify_env_tables(&entries));
    }
    if run(Suite::Gradients) {
        lines.extend(verify_gradients(&entries, args.draws, args.seed));
    }
    if run(Suite::Fishers) {
        lines.extend(verify_fishers(&entries, 10 * args.draws, args.seed));
    }
    if run(Suite::Estimators) {
        lines.extend(verify_estimators(&entries, 10_000, args.seed));
    }
    lines
}

fn parse_theta(text: &str) -> Result<PolicyParams> {
    match parse_float_list(text)?[..] {
        [a, b] => Ok(PolicyParams::new(a, b)),
        _ => Err(Error::InvalidConfig(format!("theta `{text}` is not theta0,theta1"))),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let entry = envs::resolve(&args.env)?;
    if args.by_mixing_time {
        let (csv, summary) = diagnose_by_mixing_time(&entry, &GridSpec::parse(&args.grid)?)?;
        emit(&args.out, &csv)?;
        let json = serde_json::to_string_pretty(&summary)?;
        match &args.out {
            Some(p) => fs::write(p.with_extension("json"), json)?,
            None => eprintln!("{json}"),
        }
        return Ok(());
    }
    let theta = args
        .theta
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("give --theta or --by-mixing-time".into()))?;
    emit(&args.out, &diagnose_single(&entry.mdp, &parse_theta(theta)?)?)
}

pub fn cmd_tune_beta0(args: TuneArgs) -> Result<Vec<SweepResultGrid>> {
    let file: TuneArgs = read_config(&args.config)?;
    let args = TuneArgs {
        run: args.run.over(file.run),
        betas: args.betas.or(file.betas),
        out: args.out.or(file.out),
        config: None,
    };
    let r = resolve(&args.run)?;
    let betas = match &args.betas {
        Some(text) => parse_float_list(text)?,
        None => DEFAULT_BETA0_LIST.to_vec(),
    };
    let grids = tune_beta0(&r.entry, &betas, &r.cfg, &r.grid, r.seed)?;
    let table: Vec<TuneEntry> = grids
        .iter()
        .map(|g| TuneEntry {
            beta0: g.summary.beta0,
            mean_abs_bias_diff: g.summary.mean_abs_bias_diff,
            std_abs_bias_diff: g.summary.std_abs_bias_diff,
        })
        .collect();
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            for g in &grids {
                g.write(&dir.join(format!("beta0_{}.csv", g.summary.beta0)))?;
            }
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&table)?)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&table)?),
    }
    Ok(grids)
}

/// Entry point of the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Sweep(a) => cmd_sweep(a).map(|r| {
            eprintln!(
                "{} {}: mean |bias diff| {} (std {}) over {} starts",
                r.summary.env, r.summary.method, r.summary.mean_abs_bias_diff, r.summary.std_abs_bias_diff, r.summary.n_cells
            );
            0
        }),
        Command::Verify(a) => {
            let lines = cmd_verify(&a);
            for l in &lines {
                println!("{}", l.render());
            }
            Ok(if !lines.is_empty() && lines.iter().all(|l| l.passed) { 0 } else { 1 })
        }
        Command::Diagnose(a) => cmd_diagnose(&a).map(|_| 0),
        Command::TuneBeta0(a) => cmd_tune_beta0(a).map(|_| 0),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        2
    })
}

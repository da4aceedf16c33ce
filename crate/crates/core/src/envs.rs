//! Built-in benchmark environments, the JSON environment file format, and
//! enumeration of deterministic policies.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::mdp::{MdpModel, N_ACTIONS};
use crate::policy::TabularPolicy;

pub const BUILTIN_NAMES: [&str; 6] = ["env_a1", "env_a2", "env_a3", "env_b1", "env_b2", "env_b3"];

/// Tolerance for merging equal gain or bias values in enumeration summaries.
pub const DEDUP_TOL: f64 = 1e-6;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Dynamics fully specified by the environment's published description.
    Full,
    /// Part of the dynamics rebuilt from an external description and only
    /// trusted after its enumeration statistics validate.
    Reconstructed,
}

/// Reference statistics of the deterministic-policy enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedStats {
    pub n_policies: usize,
    pub n_distinct_gains: usize,
    pub gain_range: (f64, f64),
    pub n_distinct_biases: usize,
    pub bias_range: (f64, f64),
    /// Highest bias among gain-optimal policies.
    pub nbw_bias: f64,
    pub nbw_count: usize,
    /// Absolute tolerance for comparing reported values.
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct EnvCatalogEntry {
    pub name: String,
    pub mdp: MdpModel,
    pub expected_stats: Option<ExpectedStats>,
    pub provenance: Provenance,
    /// Barrier parameter default for this environment family.
    pub default_beta0: f64,
    /// Discount factors of the three discounted-baseline scenarios:
    /// too small, near the critical value, and close to one.
    pub gamma_presets: [f64; 3],
}

pub fn builtin(name: &str) -> Result<EnvCatalogEntry> {
    match name {
        "env_a1" => Ok(env_a1()),
        "env_a2" => Ok(env_a2()),
        "env_a3" => Ok(env_a3()),
        "env_b1" => Ok(env_b1()),
        "env_b2" => Ok(env_b2()),
        "env_b3" => Ok(env_b3()),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

/// Builder over `p(s'|s,a)` and `r(s,a)` with all entries initially zero.
struct ModelBuilder {
    p: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<f64>>,
}

impl ModelBuilder {
    fn new(n: usize) -> Self {
        Self {
            p: vec![vec![vec![0.0; n]; N_ACTIONS]; n],
            r: vec![vec![0.0; N_ACTIONS]; n],
        }
    }

    /// Adds an outcome `(s, a) → next` with probability `prob` and reward
    /// `reward` received on that outcome; `r(s,a)` accumulates the expectation.
    fn edge(&mut self, s: usize, a: usize, next: usize, prob: f64, reward: f64) -> &mut Self {
        self.p[s][a][next] += prob;
        self.r[s][a] += prob * reward;
        self
    }

    /// Same outcome for both actions.
    fn both(&mut self, s: usize, next: usize, prob: f64, reward: f64) -> &mut Self {
        self.edge(s, 0, next, prob, reward).edge(s, 1, next, prob, reward)
    }

    fn build(&self) -> MdpModel {
        MdpModel::new(&self.p, &self.r, 0).expect("built-in environment is valid")
    }
}

fn entry(
    name: &str,
    mdp: MdpModel,
    stats: ExpectedStats,
    provenance: Provenance,
    beta0: f64,
    gamma_presets: [f64; 3],
) -> EnvCatalogEntry {
    EnvCatalogEntry {
        name: name.to_string(),
        mdp,
        expected_stats: Some(stats),
        provenance,
        default_beta0: beta0,
        gamma_presets,
    }
}

fn env_a1() -> EnvCatalogEntry {
    let mut m = ModelBuilder::new(2);
    m.edge(0, 0, 0, 0.5, 5.0)
        .edge(0, 0, 1, 0.5, 5.0)
        .edge(0, 1, 1, 1.0, 10.0)
        .both(1, 1, 1.0, -1.0);
    let stats = ExpectedStats {
        n_policies: 4,
        n_distinct_gains: 1,
        gain_range: (-1.0, -1.0),
        n_distinct_biases: 2,
        bias_range: (11.0, 12.0),
        nbw_bias: 12.0,
        nbw_count: 2,
        tol: 1e-9,
    };
    entry("env_a1", m.build(), stats, Provenance::Full, 0.1, [0.50, 0.95, 0.99999])
}

fn env_a2() -> EnvCatalogEntry {
    let mut m = ModelBuilder::new(5);
    m.edge(0, 0, 1, 1.0, 1.0)
        .edge(0, 1, 2, 1.0, 0.0)
        .both(1, 3, 1.0, 1.0)
        .both(2, 3, 1.0, 3.0)
        .edge(3, 0, 4, 1.0, 3.0)
        .edge(3, 1, 4, 1.0, 0.0)
        .both(4, 4, 1.0, 0.0);
    let stats = ExpectedStats {
        n_policies: 32,
        n_distinct_gains: 1,
        gain_range: (0.0, 0.0),
        n_distinct_biases: 4,
        bias_range: (2.0, 6.0),
        nbw_bias: 6.0,
        nbw_count: 8,
        tol: 1e-9,
    };
    entry("env_a2", m.build(), stats, Provenance::Full, 0.1, [0.20, 0.55, 0.99999])
}

/// Reward bonus collected when entering the goal of the 2×2 grid world, on
/// top of the step cost. Calibrated so the bias extremes come out at
/// −17.000 and 0.778.
const A3_GOAL_BONUS: f64 = 3.0;

/// 2×2 grid world: s0 bottom-left (start), s1 bottom-right, s2 top-left,
/// s3 top-right (goal, absorbing). The intended move succeeds 90% of the
/// time, otherwise the agent moves in the direction of the state's other
/// action.
fn env_a3() -> EnvCatalogEntry {
    const GOAL: usize = 3;
    // (state, [destination of action 0, destination of action 1])
    let moves = [(0, [1, 2]), (1, [0, GOAL]), (2, [GOAL, 0])];
    let mut m = ModelBuilder::new(4);
    for (s, dest) in moves {
        for a in 0..N_ACTIONS {
            for (next, prob) in [(dest[a], 0.9), (dest[1 - a], 0.1)] {
                let bonus = if next == GOAL { A3_GOAL_BONUS } else { 0.0 };
                m.edge(s, a, next, prob, -1.0 + bonus);
            }
        }
    }
    m.both(GOAL, GOAL, 1.0, 0.0);
    let stats = ExpectedStats {
        n_policies: 16,
        n_distinct_gains: 1,
        gain_range: (0.0, 0.0),
        n_distinct_biases: 6,
        bias_range: (-17.000, 0.778),
        nbw_bias: 0.778,
        nbw_count: 4,
        tol: 1e-3,
    };
    entry("env_a3", m.build(), stats, Provenance::Full, 0.1, [0.00, 0.05, 0.99999])
}

fn env_b1() -> EnvCatalogEntry {
    let mut m = ModelBuilder::new(2);
    m.edge(0, 0, 1, 1.0, 1.0)
        .edge(0, 1, 1, 1.0, 3.0)
        .edge(1, 0, 0, 0.5, 1.0)
        .edge(1, 0, 1, 0.5, 0.0)
        .edge(1, 1, 1, 1.0, 4.0);
    let stats = ExpectedStats {
        n_policies: 4,
        n_distinct_gains: 3,
        gain_range: (0.67, 4.0),
        n_distinct_biases: 4,
        bias_range: (-3.0, 1.11),
        nbw_bias: -1.0,
        nbw_count: 1,
        tol: 5e-3,
    };
    entry("env_b1", m.build(), stats, Provenance::Full, 100.0, [0.00, 0.05, 0.99999])
}

/// Howard's three-town taxicab problem; each town keeps its first two
/// actions. Entries are `(next-town probabilities, rewards per next town)`.
const TAXI_TOWNS: [[([f64; 3], [f64; 3]); 2]; 3] = [
    [
        ([0.5, 0.25, 0.25], [10.0, 4.0, 8.0]),
        ([0.0625, 0.75, 0.1875], [8.0, 2.0, 4.0]),
    ],
    [
        ([0.5, 0.0, 0.5], [14.0, 0.0, 18.0]),
        ([0.0625, 0.875, 0.0625], [8.0, 16.0, 8.0]),
    ],
    [
        ([0.25, 0.25, 0.5], [10.0, 2.0, 8.0]),
        ([0.125, 0.75, 0.125], [6.0, 4.0, 2.0]),
    ],
];

fn env_b2() -> EnvCatalogEntry {
    let mut m = ModelBuilder::new(5);
    m.edge(0, 0, 1, 1.0, 5.0)
        .edge(0, 1, 2, 1.0, 25.0)
        .both(1, 2, 1.0, 50.0);
    for (town, actions) in TAXI_TOWNS.iter().enumerate() {
        for (a, (probs, rewards)) in actions.iter().enumerate() {
            for k in 0..3 {
                if probs[k] > 0.0 {
                    m.edge(2 + town, a, 2 + k, probs[k], rewards[k]);
                }
            }
        }
    }
    let stats = ExpectedStats {
        n_policies: 32,
        n_distinct_gains: 8,
        gain_range: (8.621, 13.345),
        n_distinct_biases: 16,
        bias_range: (-1.683, 35.907),
        nbw_bias: 16.367,
        nbw_count: 2,
        tol: 1e-3,
    };
    entry("env_b2", m.build(), stats, Provenance::Reconstructed, 100.0, [0.30, 0.80, 0.99999])
}

/// Strens' five-state chain with slip probability 0.2: action 0 moves
/// forward (reward 10 when staying at the far end), action 1 returns to the
/// chain start with reward 2; a slip swaps the two outcomes.
fn env_b3() -> EnvCatalogEntry {
    const START: usize = 2;
    const LEN: usize = 5;
    const SLIP: f64 = 0.2;
    let mut m = ModelBuilder::new(START + LEN);
    m.edge(0, 0, 1, 1.0, 5.0)
        .edge(0, 1, 1, 1.0, 10.0)
        .edge(1, 0, START, 1.0, 8.0)
        .edge(1, 1, START, 1.0, 1.0);
    for i in 0..LEN {
        let s = START + i;
        let forward = START + (i + 1).min(LEN - 1);
        let forward_reward = if i == LEN - 1 { 10.0 } else { 0.0 };
        let outcomes = [(forward, forward_reward), (START, 2.0)];
        for a in 0..N_ACTIONS {
            let (intended, slipped) = (outcomes[a], outcomes[1 - a]);
            m.edge(s, a, intended.0, 1.0 - SLIP, intended.1)
                .edge(s, a, slipped.0, SLIP, slipped.1);
        }
    }
    let stats = ExpectedStats {
        n_policies: 128,
        n_distinct_gains: 32,
        gain_range: (0.732, 3.677),
        n_distinct_biases: 128,
        bias_range: (-14.461, 15.871),
        nbw_bias: -2.461,
        nbw_count: 1,
        tol: 1e-3,
    };
    entry("env_b3", m.build(), stats, Provenance::Reconstructed, 100.0, [0.50, 0.85, 0.99999])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicRow {
    pub actions: Vec<usize>,
    pub gain: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicTable {
    pub rows: Vec<DeterministicRow>,
    pub distinct_gains: Vec<f64>,
    pub distinct_biases: Vec<f64>,
    pub max_gain: f64,
    /// Highest bias among gain-optimal policies.
    pub nbw_bias: f64,
    pub nbw_count: usize,
}

/// Evaluates all `2^n` deterministic policies; bias is measured from the
/// MDP's initial state.
pub fn enumerate_deterministic(mdp: &MdpModel) -> Result<DeterministicTable> {
    let n = mdp.n_states();
    let s0 = mdp.initial_state();
    let mut rows = Vec::with_capacity(1 << n);
    for code in 0..(1usize << n) {
        let actions: Vec<usize> = (0..n).map(|s| (code >> s) & 1).collect();
        // periodic deterministic chains never meet the mixing tolerance, so
        // this path avoids computing a mixing time
        let (gain, bias) = eval::gain_and_bias(mdp, &TabularPolicy::deterministic(&actions), s0)?;
        rows.push(DeterministicRow { actions, gain, bias });
    }
    let max_gain = rows.iter().map(|r| r.gain).fold(f64::NEG_INFINITY, f64::max);
    let optimal: Vec<&DeterministicRow> = rows
        .iter()
        .filter(|r| (r.gain - max_gain).abs() <= DEDUP_TOL)
        .collect();
    let nbw_bias = optimal.iter().map(|r| r.bias).fold(f64::NEG_INFINITY, f64::max);
    let nbw_count = optimal
        .iter()
        .filter(|r| (r.bias - nbw_bias).abs() <= DEDUP_TOL)
        .count();
    Ok(DeterministicTable {
        distinct_gains: distinct(rows.iter().map(|r| r.gain)),
        distinct_biases: distinct(rows.iter().map(|r| r.bias)),
        rows,
        max_gain,
        nbw_bias,
        nbw_count,
    })
}

/// Sorted values with neighbours closer than [`DEDUP_TOL`] merged.
fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::new();
    for x in v {
        match out.last() {
            Some(&last) if (x - last).abs() <= DEDUP_TOL => {}
            _ => out.push(x),
        }
    }
    out
}

/// One comparison of an enumeration statistic against its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct StatCheck {
    pub name: String,
    pub expected: f64,
    pub measured: f64,
    pub tol: f64,
    pub passed: bool,
}

impl StatCheck {
    fn value(name: &str, expected: f64, measured: f64, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            expected,
            measured,
            tol,
            passed: (expected - measured).abs() <= tol,
        }
    }

    fn count(name: &str, expected: usize, measured: usize) -> Self {
        Self::value(name, expected as f64, measured as f64, 0.0)
    }
}

/// Compares an enumeration table against reference statistics.
pub fn check_stats(table: &DeterministicTable, stats: &ExpectedStats) -> Vec<StatCheck> {
    let first = |v: &[f64]| v.first().copied().unwrap_or(f64::NAN);
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    vec![
        StatCheck::count("n_policies", stats.n_policies, table.rows.len()),
        StatCheck::count("n_distinct_gains", stats.n_distinct_gains, table.distinct_gains.len()),
        StatCheck::value("min_gain", stats.gain_range.0, first(&table.distinct_gains), stats.tol),
        StatCheck::value("max_gain", stats.gain_range.1, last(&table.distinct_gains), stats.tol),
        StatCheck::count("n_distinct_biases", stats.n_distinct_biases, table.distinct_biases.len()),
        StatCheck::value("min_bias", stats.bias_range.0, first(&table.distinct_biases), stats.tol),
        StatCheck::value("max_bias", stats.bias_range.1, last(&table.distinct_biases), stats.tol),
        StatCheck::value("nbw_bias", stats.nbw_bias, table.nbw_bias, stats.tol),
        StatCheck::count("nbw_count", stats.nbw_count, table.nbw_count),
    ]
}

/// On-disk environment document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvFile {
    pub format: u32,
    pub name: String,
    pub n_states: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`, expected immediate rewards.
    pub rewards: Vec<Vec<f64>>,
    pub initial_state: usize,
}

impl EnvFile {
    pub fn from_entry(entry: &EnvCatalogEntry) -> Self {
        Self {
            format: FORMAT_VERSION,
            name: entry.name.clone(),
            n_states: entry.mdp.n_states(),
            transitions: entry.mdp.transitions_nested(),
            rewards: entry.mdp.rewards_nested(),
            initial_state: entry.mdp.initial_state(),
        }
    }

    pub fn into_entry(self) -> Result<EnvCatalogEntry> {
        if self.format != FORMAT_VERSION {
            return Err(Error::InvalidMdp(format!(
                "unsupported format version {}",
                self.format
            )));
        }
        if self.transitions.len() != self.n_states {
            return Err(Error::InvalidMdp(format!(
                "n_states is {} but {} transition rows were given",
                self.n_states,
                self.transitions.len()
            )));
        }
        let mdp = MdpModel::new(&self.transitions, &self.rewards, self.initial_state)?;
        Ok(EnvCatalogEntry {
            name: self.name,
            mdp,
            expected_stats: None,
            provenance: Provenance::Full,
            default_beta0: 0.1,
            gamma_presets: [0.5, 0.95, 0.99999],
        })
    }
}

pub fn load_env(path: &Path) -> Result<EnvCatalogEntry> {
    let text = fs::read_to_string(path)?;
    let file: EnvFile = serde_json::from_str(&text)?;
    file.into_entry()
}

pub fn save_env(entry: &EnvCatalogEntry, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&EnvFile::from_entry(entry))?;
    fs::write(path, text)?;
    Ok(())
}

/// Resolves a built-in name, or otherwise treats `name` as a file path.
pub fn resolve(name: &str) -> Result<EnvCatalogEntry> {
    match builtin(name) {
        Ok(e) => Ok(e),
        Err(Error::UnknownEnv(_)) if Path::new(name).exists() => load_env(Path::new(name)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn builtins_are_row_stochastic() {
        for name in BUILTIN_NAMES {
            let e = builtin(name).unwrap();
            let n = e.mdp.n_states();
            for s in 0..n {
                for a in 0..N_ACTIONS {
                    let sum: f64 = (0..n).map(|x| e.mdp.prob(s, a, x)).sum();
                    assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
                }
            }
        }
        assert_eq!(builtin("env_a3").unwrap().mdp.n_states(), 4);
        assert!(matches!(builtin("env_z9"), Err(Error::UnknownEnv(_))));
    }

    #[test]
    fn env_a1_edges() {
        let m = builtin("env_a1").unwrap().mdp;
        assert_eq!(m.reward(0, 0), 5.0);
        assert_eq!(m.prob(0, 0, 0), 0.5);
        assert_eq!(m.reward(0, 1), 10.0);
        assert_eq!(m.prob(0, 1, 1), 1.0);
        assert_eq!(m.reward(1, 0), -1.0);
        assert_eq!(m.reward(1, 1), -1.0);
    }

    #[test]
    fn env_b1_edges() {
        let m = builtin("env_b1").unwrap().mdp;
        assert_eq!(m.prob(1, 0, 0), 0.5);
        assert_eq!(m.prob(1, 0, 1), 0.5);
        assert_eq!(m.reward(1, 0), 0.5);
        assert_eq!(m.reward(1, 1), 4.0);
        assert_eq!(m.reward(0, 1), 3.0);
    }

    #[test]
    fn env_a1_enumeration() {
        let t = enumerate_deterministic(&builtin("env_a1").unwrap().mdp).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows.iter().all(|r| (r.gain + 1.0).abs() < 1e-9));
        assert_eq!(t.distinct_biases.len(), 2);
        assert_eq!(t.rows.iter().filter(|r| (r.bias - 12.0).abs() < 1e-9).count(), 2);
        assert_eq!(t.rows.iter().filter(|r| (r.bias - 11.0).abs() < 1e-9).count(), 2);
    }

    #[test]
    fn env_b1_enumeration() {
        let t = enumerate_deterministic(&builtin("env_b1").unwrap().mdp).unwrap();
        let gains = [2.0 / 3.0, 4.0 / 3.0, 4.0];
        assert_eq!(t.distinct_gains.len(), 3);
        for (g, want) in t.distinct_gains.iter().zip(gains) {
            assert_abs_diff_eq!(*g, want, epsilon = 1e-9);
        }
        let biases = [-3.0, -1.0, 0.22, 1.11];
        for (b, want) in t.distinct_biases.iter().zip(biases) {
            assert!((b - want).abs() <= 5e-3, "{b} vs {want}");
        }
        assert_abs_diff_eq!(t.nbw_bias, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn reconstructed_environments_validate() {
        for name in ["env_b2", "env_b3"] {
            let e = builtin(name).unwrap();
            let t = enumerate_deterministic(&e.mdp).unwrap();
            for c in check_stats(&t, e.expected_stats.as_ref().unwrap()) {
                assert!(c.passed, "{name}: {c:?}");
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a1.json");
        let e = builtin("env_a1").unwrap();
        save_env(&e, &path).unwrap();
        let back = load_env(&path).unwrap();
        assert_eq!(back.mdp, e.mdp);
        assert_eq!(back.name, "env_a1");
    }

    #[test]
    fn malformed_row_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut f = EnvFile::from_entry(&builtin("env_a1").unwrap());
        f.transitions[1][0] = vec![0.0, 0.9];
        fs::write(&path, serde_json::to_string(&f).unwrap()).unwrap();
        match load_env(&path) {
            Err(Error::NotStochastic { state, action, sum }) => {
                assert_eq!((state, action), (1, 0));
                assert_abs_diff_eq!(sum, 0.9);
            }
            other => panic!("expected NotStochastic, got {other:?}"),
        }
    }

    #[test]
    fn wrong_format_version_is_rejected() {
        let mut f = EnvFile::from_entry(&builtin("env_a1").unwrap());
        f.format = 2;
        assert!(f.into_entry().is_err());
    }
}

//! Standard and behavior-supported Bellman operators with exact solvers.
//!
//! The Q-operator replaces the backup of every unsupported (s, a) with the
//! constant `q_min`. The V-operator penalizes the state *entered* through an
//! unsupported action with `(q_min - r) / gamma`, so that lifting V back to Q
//! reproduces `q_min` on that entry. Root states have no entering action and
//! always take the standard branch.
//!
//! Terminal states are absorbing: Q rows at terminals are zero and a terminal
//! entered through a supported action has value zero. A terminal entered
//! through an unsupported action still carries the penalty value; without it
//! the V and Q fixed points would disagree on the final token.

use std::fmt::Write as _;

use crate::behavior::SupportMask;
use crate::error::{Error, Result};
use crate::metrics_io::fmt_sig;
use crate::policy::StochasticPolicy;
use crate::seq_mdp::{TabularMdp, TokenMdp};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Critic floor of the reference hyper-parameters.
pub const DEFAULT_V_MIN: f64 = -15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_actions: usize,
    values: Vec<f64>,
}

/// Advantages share the Q layout.
pub type ATable = QTable;

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_values(n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if n_actions == 0 || values.len() % n_actions != 0 {
            return Err(Error::DimensionMismatch {
                expected: n_actions,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("q table".into()));
        }
        Ok(Self { n_actions, values })
    }

    pub fn n_states(&self) -> usize {
        self.values.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.values[s * self.n_actions + a] = value;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        sup_distance(&self.values, &other.values)
    }

    /// `state,action,value` rows for non-terminal states.
    pub fn to_csv(&self, tab: &TabularMdp) -> String {
        let mut out = String::from("state,action,value\n");
        for s in tab.index().nonterminal() {
            for a in 0..self.n_actions {
                let _ = writeln!(out, "{s},{a},{}", fmt_sig(self.get(s, a)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VTable {
    values: Vec<f64>,
}

impl VTable {
    pub fn zeros(n_states: usize) -> Self {
        Self {
            values: vec![0.0; n_states],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("v table".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_distance(&self, other: &VTable) -> f64 {
        sup_distance(&self.values, &other.values)
    }

    /// `state,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,value\n");
        for (s, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{s},{}", fmt_sig(*v));
        }
        out
    }
}

pub fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueBounds {
    pub r_min: f64,
    pub q_min: f64,
    pub v_min: f64,
}

impl ValueBounds {
    pub fn new(r_min: f64, gamma: f64, v_min: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside [0, 1)")));
        }
        if !(v_min <= r_min.min(0.0)) {
            return Err(Error::InvalidMdp(format!(
                "v_min {v_min} must not exceed min(0, r_min) = {}",
                r_min.min(0.0)
            )));
        }
        Ok(Self {
            r_min,
            q_min: r_min / (1.0 - gamma),
            v_min,
        })
    }

    /// Bounds for a token MDP. Non-terminal emissions pay zero, so the
    /// per-step floor is `min(r_min, 0)`.
    pub fn for_mdp(mdp: &TokenMdp, v_min: f64) -> Result<Self> {
        Self::new(mdp.r_min().min(0.0), mdp.gamma(), v_min)
    }

    /// Bounds when a per-token KL term with coefficient `nu` can push shaped
    /// rewards below the reward floor by up to `nu * max_abs_kl`.
    pub fn for_shaped(r_min: f64, gamma: f64, nu: f64, max_abs_kl: f64, v_min: f64) -> Result<Self> {
        Self::new(r_min.min(0.0) - nu * max_abs_kl, gamma, v_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QMode {
    Standard,
    BehaviorSupported,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solved<T> {
    pub table: T,
    pub iterations: usize,
    /// Sup-norm change after each application.
    pub residuals: Vec<f64>,
}

fn check_dims(tab: &TabularMdp, mask: &SupportMask, pi: &StochasticPolicy) -> Result<()> {
    let n = tab.n_states();
    let v = tab.n_actions();
    for (expected, got) in [
        (n, mask.n_states()),
        (v, mask.n_actions()),
        (n, pi.n_states()),
        (v, pi.n_actions()),
    ] {
        if expected != got {
            return Err(Error::DimensionMismatch { expected, got });
        }
    }
    Ok(())
}

/// E_{a ~ pi(.|s)} Q(s, a) at every state; zero at terminals.
pub fn state_values(tab: &TabularMdp, pi: &StochasticPolicy, q: &QTable) -> Vec<f64> {
    let index = tab.index();
    (0..tab.n_states())
        .map(|s| {
            if index.is_terminal(s) {
                0.0
            } else {
                pi.row(s).iter().zip(q.row(s)).map(|(p, v)| p * v).sum()
            }
        })
        .collect()
}

pub fn apply_q_operator(
    tab: &TabularMdp,
    mask: &SupportMask,
    pi: &StochasticPolicy,
    q: &QTable,
    mode: QMode,
    bounds: &ValueBounds,
) -> Result<QTable> {
    check_dims(tab, mask, pi)?;
    if q.n_states() != tab.n_states() || q.n_actions() != tab.n_actions() {
        return Err(Error::DimensionMismatch {
            expected: tab.n_states() * tab.n_actions(),
            got: q.values().len(),
        });
    }
    let index = tab.index();
    let gamma = tab.gamma();
    let v = tab.n_actions();
    let cont = state_values(tab, pi, q);
    let mut out = QTable::zeros(tab.n_states(), v);
    for s in index.nonterminal() {
        for a in 0..v {
            let value = if mode == QMode::BehaviorSupported && !mask.supported(s, a) {
                bounds.q_min
            } else {
                let next = tab.next(s, a);
                tab.state_rewards()[next] + gamma * cont[next]
            };
            out.set(s, a, value);
        }
    }
    Ok(out)
}

pub fn solve_q_fixed_point(
    tab: &TabularMdp,
    mask: &SupportMask,
    pi: &StochasticPolicy,
    mode: QMode,
    bounds: &ValueBounds,
    opts: SolveOptions,
    init: Option<QTable>,
) -> Result<Solved<QTable>> {
    let mut q = init.unwrap_or_else(|| QTable::zeros(tab.n_states(), tab.n_actions()));
    let mut residuals = Vec::new();
    for it in 1..=opts.max_iter {
        let next = apply_q_operator(tab, mask, pi, &q, mode, bounds)?;
        let r = next.sup_distance(&q);
        residuals.push(r);
        q = next;
        if r <= opts.tol {
            return Ok(Solved {
                table: q,
                iterations: it,
                residuals,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

pub fn apply_v_operator(
    tab: &TabularMdp,
    mask: &SupportMask,
    pi: &StochasticPolicy,
    v: &VTable,
    bounds: &ValueBounds,
) -> Result<VTable> {
    check_dims(tab, mask, pi)?;
    if v.len() != tab.n_states() {
        return Err(Error::DimensionMismatch {
            expected: tab.n_states(),
            got: v.len(),
        });
    }
    let index = tab.index();
    let gamma = tab.gamma();
    let rewards = tab.state_rewards();
    let mut out = vec![0.0; tab.n_states()];
    for s in 0..tab.n_states() {
        out[s] = if !mask.entered_supported(index, s) {
            if gamma == 0.0 {
                return Err(Error::GammaZero(s));
            }
            // rewards[s] is r(parent, entering action).
            (bounds.q_min - rewards[s]) / gamma
        } else if index.is_terminal(s) {
            0.0
        } else {
            (0..tab.n_actions())
                .map(|a| {
                    let next = tab.next(s, a);
                    pi.prob(s, a) * (rewards[next] + gamma * v.get(next))
                })
                .sum()
        };
    }
    VTable::from_values(out)
}

pub fn solve_v_fixed_point(
    tab: &TabularMdp,
    mask: &SupportMask,
    pi: &StochasticPolicy,
    bounds: &ValueBounds,
    opts: SolveOptions,
    init: Option<VTable>,
) -> Result<Solved<VTable>> {
    let mut v = init.unwrap_or_else(|| VTable::zeros(tab.n_states()));
    let mut residuals = Vec::new();
    for it in 1..=opts.max_iter {
        let next = apply_v_operator(tab, mask, pi, &v, bounds)?;
        let r = next.sup_distance(&v);
        residuals.push(r);
        v = next;
        if r <= opts.tol {
            return Ok(Solved {
                table: v,
                iterations: it,
                residuals,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Q(s, a) = r(s, a) + gamma * V(T(s, a)) on non-terminal states.
pub fn lift_v_to_q(tab: &TabularMdp, v: &VTable) -> QTable {
    let gamma = tab.gamma();
    let mut q = QTable::zeros(tab.n_states(), tab.n_actions());
    for s in tab.index().nonterminal() {
        for a in 0..tab.n_actions() {
            let next = tab.next(s, a);
            q.set(s, a, tab.state_rewards()[next] + gamma * v.get(next));
        }
    }
    q
}

/// A(s, a) = Q(s, a) - sum_a' pi(a'|s) Q(s, a').
pub fn advantage_from_values(q: &QTable, pi: &StochasticPolicy) -> Result<ATable> {
    if q.n_states() != pi.n_states() || q.n_actions() != pi.n_actions() {
        return Err(Error::DimensionMismatch {
            expected: q.values().len(),
            got: pi.probs().len(),
        });
    }
    let mut adv = q.clone();
    for s in 0..q.n_states() {
        let baseline: f64 = pi.row(s).iter().zip(q.row(s)).map(|(p, v)| p * v).sum();
        for a in 0..q.n_actions() {
            adv.set(s, a, q.get(s, a) - baseline);
        }
    }
    Ok(adv)
}

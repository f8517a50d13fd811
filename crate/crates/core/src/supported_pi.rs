//! Exact behavior-supported policy iteration.
//!
//! Each round evaluates the current policy with the behavior-supported
//! Q-operator and switches to the greedy policy. Because unsupported entries
//! sit at `q_min`, the greedy choice lands in the support set wherever the
//! support is non-empty. A brute-force enumerator over deterministic
//! supported policies serves as the optimality oracle.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::behavior::SupportMask;
use crate::error::{Error, Result};
use crate::metrics_io::fmt_sig;
use crate::policy::StochasticPolicy;
use crate::seq_mdp::{TabularMdp, Token};
use crate::value_ops::{solve_q_fixed_point, QMode, QTable, SolveOptions, ValueBounds};

pub const DEFAULT_BRUTE_FORCE_CAP: u128 = 2_000_000;

/// Exact J(pi) by backward induction over the enumeration, weighted by mu.
pub fn performance(tab: &TabularMdp, pi: &StochasticPolicy) -> f64 {
    let values = state_values_exact(tab, pi);
    tab.index()
        .roots()
        .iter()
        .zip(tab.mdp().mu())
        .map(|(&r, &w)| w * values[r])
        .sum()
}

/// V^pi at every state by backward induction (children precede nothing).
pub fn state_values_exact(tab: &TabularMdp, pi: &StochasticPolicy) -> Vec<f64> {
    let index = tab.index();
    let gamma = tab.gamma();
    let rewards = tab.state_rewards();
    let mut values = vec![0.0; tab.n_states()];
    for s in (0..tab.n_states()).rev() {
        if index.is_terminal(s) {
            continue;
        }
        values[s] = (0..tab.n_actions())
            .map(|a| {
                let p = pi.prob(s, a);
                if p == 0.0 {
                    return 0.0;
                }
                let next = tab.next(s, a);
                p * (rewards[next] + gamma * values[next])
            })
            .sum();
    }
    values
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Among exact maximizers prefer supported actions, then the lowest index.
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone)]
pub struct Greedy {
    pub policy: StochasticPolicy,
    pub choices: Vec<Token>,
    /// Non-terminal states with empty support, where the choice is unconstrained.
    pub empty_support_states: Vec<usize>,
}

pub fn greedy_improve(
    tab: &TabularMdp,
    q_beta: &QTable,
    mask: &SupportMask,
    tie_break: TieBreak,
) -> Greedy {
    let TieBreak::LowestIndex = tie_break;
    let index = tab.index();
    let v = tab.n_actions();
    let mut choices = vec![0; tab.n_states()];
    let mut empty_support_states = Vec::new();
    for s in index.nonterminal() {
        if mask.is_empty_at(s) {
            empty_support_states.push(s);
        }
        let row = q_beta.row(s);
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let maximizers = (0..v).filter(|&a| row[a] == best);
        let mut pick = None;
        for a in maximizers {
            if mask.supported(s, a) {
                pick = Some(a);
                break;
            }
            pick.get_or_insert(a);
        }
        choices[s] = pick.unwrap_or(0);
    }
    Greedy {
        policy: StochasticPolicy::deterministic(v, &choices),
        choices,
        empty_support_states,
    }
}

/// `pi` puts zero mass on unsupported actions at every state whose support
/// is non-empty. Empty-support states are reported separately.
pub fn is_behavior_supported(tab: &TabularMdp, pi: &StochasticPolicy, mask: &SupportMask) -> bool {
    tab.index().nonterminal().all(|s| {
        mask.is_empty_at(s) || (0..tab.n_actions()).all(|a| mask.supported(s, a) || pi.prob(s, a) == 0.0)
    })
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub round: usize,
    pub policy: StochasticPolicy,
    pub performance: f64,
    pub supported: bool,
    /// States whose action changed relative to the previous round.
    pub changes: usize,
}

#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub empty_support_states: Vec<usize>,
    pub converged: bool,
}

impl IterationTrace {
    pub fn final_policy(&self) -> &StochasticPolicy {
        &self.records.last().expect("trace is never empty").policy
    }

    pub fn final_performance(&self) -> f64 {
        self.records.last().expect("trace is never empty").performance
    }

    /// `round,J,changes,supported_flag`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,J,changes,supported_flag\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.round,
                fmt_sig(r.performance),
                r.changes,
                u8::from(r.supported)
            );
        }
        out
    }
}

fn count_changes(tab: &TabularMdp, prev: &StochasticPolicy, next: &StochasticPolicy) -> usize {
    tab.index()
        .nonterminal()
        .filter(|&s| prev.row(s) != next.row(s))
        .count()
}

pub fn policy_iteration(
    tab: &TabularMdp,
    mask: &SupportMask,
    pi0: &StochasticPolicy,
    bounds: &ValueBounds,
    max_rounds: usize,
) -> Result<IterationTrace> {
    let mut records = vec![IterationRecord {
        round: 0,
        policy: pi0.clone(),
        performance: performance(tab, pi0),
        supported: is_behavior_supported(tab, pi0, mask),
        changes: 0,
    }];
    for round in 1..=max_rounds {
        let current = &records.last().expect("non-empty").policy;
        let q = solve_q_fixed_point(
            tab,
            mask,
            current,
            QMode::BehaviorSupported,
            bounds,
            SolveOptions::default(),
            None,
        )?
        .table;
        let greedy = greedy_improve(tab, &q, mask, TieBreak::LowestIndex);
        let changes = count_changes(tab, current, &greedy.policy);
        if changes == 0 {
            return Ok(IterationTrace {
                records,
                empty_support_states: greedy.empty_support_states,
                converged: true,
            });
        }
        records.push(IterationRecord {
            round,
            performance: performance(tab, &greedy.policy),
            supported: is_behavior_supported(tab, &greedy.policy, mask),
            policy: greedy.policy,
            changes,
        });
    }
    Err(Error::NoConvergence {
        iterations: max_rounds,
        residual: f64::NAN,
    })
}

/// J of a deterministic policy by following the unique path from each root.
pub fn deterministic_performance(tab: &TabularMdp, choices: &[Token]) -> f64 {
    let index = tab.index();
    let gamma = tab.gamma();
    let mut total = 0.0;
    for (p, &w) in tab.mdp().mu().iter().enumerate() {
        let mut s = index.root(p);
        let mut discount = 1.0;
        let mut ret = 0.0;
        while !index.is_terminal(s) {
            s = tab.next(s, choices[s]);
            ret += discount * tab.state_rewards()[s];
            discount *= gamma;
        }
        total += w * ret;
    }
    total
}

#[derive(Debug, Clone)]
pub struct BruteForce {
    pub policy: StochasticPolicy,
    pub choices: Vec<Token>,
    pub performance: f64,
    pub candidates: u128,
}

/// Enumerates every deterministic policy that picks a supported action at
/// each decision state reachable under the support. Empty-support states
/// take action 0, matching the greedy fallback over an all-`q_min` row.
pub fn brute_force_optimal(tab: &TabularMdp, mask: &SupportMask, cap: u128) -> Result<BruteForce> {
    let index = tab.index();
    let v = tab.n_actions();
    let mut decision: Vec<(usize, Vec<Token>)> = Vec::new();
    let mut base = vec![0; tab.n_states()];
    for s in index.nonterminal() {
        base[s] = mask.support(s).first().copied().unwrap_or(0);
    }
    let mut queue: VecDeque<usize> = index.roots().iter().copied().collect();
    let mut seen = vec![false; tab.n_states()];
    while let Some(s) = queue.pop_front() {
        if seen[s] || index.is_terminal(s) {
            continue;
        }
        seen[s] = true;
        let support = mask.support(s);
        let options = if support.is_empty() { vec![0] } else { support };
        for &a in &options {
            queue.push_back(tab.next(s, a));
        }
        if options.len() > 1 {
            decision.push((s, options));
        } else {
            base[s] = options[0];
        }
    }
    let candidates = decision
        .iter()
        .try_fold(1u128, |acc, (_, o)| acc.checked_mul(o.len() as u128))
        .unwrap_or(u128::MAX);
    if candidates > cap {
        return Err(Error::CapExceeded {
            needed: candidates,
            cap,
        });
    }
    let mut digits = vec![0usize; decision.len()];
    let mut choices = base.clone();
    for (d, (s, options)) in decision.iter().enumerate() {
        choices[*s] = options[digits[d]];
    }
    let mut best_choices = choices.clone();
    let mut best = deterministic_performance(tab, &choices);
    // Mixed-radix counting with the first decision state most significant,
    // so candidates arrive in lexicographic order and the first maximum wins.
    'outer: loop {
        let mut d = decision.len();
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            digits[d] += 1;
            let (s, options) = &decision[d];
            if digits[d] < options.len() {
                choices[*s] = options[digits[d]];
                break;
            }
            digits[d] = 0;
            choices[*s] = options[0];
        }
        let j = deterministic_performance(tab, &choices);
        if j > best {
            best = j;
            best_choices.copy_from_slice(&choices);
        }
    }
    Ok(BruteForce {
        policy: StochasticPolicy::deterministic(v, &best_choices),
        choices: best_choices,
        performance: best,
        candidates,
    })
}

/// Undiscounted probability of reaching each state.
pub fn occupancy(tab: &TabularMdp, pi: &StochasticPolicy) -> Vec<f64> {
    let index = tab.index();
    let mut reach = vec![0.0; tab.n_states()];
    for (p, &w) in tab.mdp().mu().iter().enumerate() {
        reach[index.root(p)] += w;
    }
    for s in 0..tab.n_states() {
        if index.is_terminal(s) || reach[s] == 0.0 {
            continue;
        }
        for a in 0..tab.n_actions() {
            reach[tab.next(s, a)] += reach[s] * pi.prob(s, a);
        }
    }
    reach
}

/// Normalized discounted occupancy (1 - gamma) * sum_t gamma^t P(s_t = s).
/// A state at depth t can only be visited at time t.
pub fn discounted_occupancy(tab: &TabularMdp, pi: &StochasticPolicy) -> Vec<f64> {
    let gamma = tab.gamma();
    occupancy(tab, pi)
        .into_iter()
        .enumerate()
        .map(|(s, r)| (1.0 - gamma) * gamma.powi(tab.index().depth(s) as i32) * r)
        .collect()
}

//! Empirical behavior policy and support queries.
//!
//! The behavior policy is the next-token distribution of the reward model's
//! training sequences. An action is supported at a state iff its behavior
//! probability is strictly greater than `epsilon_beta`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq_mdp::{SeqState, StateIndex, Token, TokenMdp, Trajectory};

/// Threshold used by the reference hyper-parameters.
pub const DEFAULT_EPSILON_BETA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    pub records: Vec<(usize, Vec<Token>)>,
}

impl SequenceDataset {
    pub fn new(records: Vec<(usize, Vec<Token>)>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Every record must be a complete (terminal) response under `mdp`.
    pub fn validate(&self, mdp: &TokenMdp) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidRecord {
                index: 0,
                reason: "dataset is empty".into(),
            });
        }
        for (i, (p, toks)) in self.records.iter().enumerate() {
            let s = SeqState::new(*p, toks.clone());
            mdp.validate_state(&s).map_err(|e| Error::InvalidRecord {
                index: i,
                reason: e.to_string(),
            })?;
            if !mdp.is_terminal(&s) {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: format!("{s} is not a complete response"),
                });
            }
        }
        Ok(())
    }

    /// Parses `prompt_id<TAB>t0,t1,...,tk` lines. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (p, toks) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected prompt_id<TAB>tokens".into(),
            })?;
            let prompt = p.trim().parse::<usize>().map_err(|e| Error::Parse {
                line: n + 1,
                message: format!("prompt id: {e}"),
            })?;
            records.push((prompt, parse_tokens(toks, n + 1)?));
        }
        Ok(Self { records })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, toks) in &self.records {
            let _ = writeln!(out, "{p}\t{}", join_tokens(toks));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub(crate) fn parse_tokens(field: &str, line: usize) -> Result<Vec<Token>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|t| {
            t.trim().parse::<Token>().map_err(|e| Error::Parse {
                line,
                message: format!("token `{t}`: {e}"),
            })
        })
        .collect()
}

pub(crate) fn join_tokens(toks: &[Token]) -> String {
    toks.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Rule for states the dataset never visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Every action unsupported.
    #[default]
    EmptySupport,
    /// Uniform behavior distribution; ablations only.
    InheritUniform,
}

#[derive(Debug, Clone)]
pub struct BehaviorPolicy {
    n_actions: usize,
    epsilon_beta: f64,
    fallback: Fallback,
    rows: HashMap<SeqState, Vec<f64>>,
    visits: HashMap<SeqState, u64>,
}

pub fn fit_behavior(
    data: &SequenceDataset,
    mdp: &TokenMdp,
    epsilon_beta: f64,
) -> Result<BehaviorPolicy> {
    fit_behavior_with(data, mdp, epsilon_beta, Fallback::default())
}

pub fn fit_behavior_with(
    data: &SequenceDataset,
    mdp: &TokenMdp,
    epsilon_beta: f64,
    fallback: Fallback,
) -> Result<BehaviorPolicy> {
    if !(epsilon_beta >= 0.0) {
        return Err(Error::InvalidPolicy(format!("epsilon_beta {epsilon_beta} < 0")));
    }
    data.validate(mdp)?;
    let v = mdp.n_actions();
    let mut counts: HashMap<SeqState, Vec<u64>> = HashMap::new();
    for (p, toks) in &data.records {
        let mut prefix = SeqState::root(*p);
        for &a in toks {
            counts.entry(prefix.clone()).or_insert_with(|| vec![0; v])[a] += 1;
            prefix.tokens.push(a);
        }
    }
    let mut rows = HashMap::with_capacity(counts.len());
    let mut visits = HashMap::with_capacity(counts.len());
    for (s, row) in counts {
        let n: u64 = row.iter().sum();
        rows.insert(s.clone(), row.iter().map(|&c| c as f64 / n as f64).collect());
        visits.insert(s, n);
    }
    Ok(BehaviorPolicy {
        n_actions: v,
        epsilon_beta,
        fallback,
        rows,
        visits,
    })
}

impl BehaviorPolicy {
    /// Builds a policy from explicit rows (used by tests and config tables).
    pub fn from_rows(
        n_actions: usize,
        epsilon_beta: f64,
        fallback: Fallback,
        rows: HashMap<SeqState, Vec<f64>>,
    ) -> Result<Self> {
        for (s, row) in &rows {
            if row.len() != n_actions {
                return Err(Error::DimensionMismatch {
                    expected: n_actions,
                    got: row.len(),
                });
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidPolicy(format!("behavior row at {s} is not a distribution")));
            }
        }
        Ok(Self {
            n_actions,
            epsilon_beta,
            fallback,
            visits: HashMap::new(),
            rows,
        })
    }

    pub fn epsilon_beta(&self) -> f64 {
        self.epsilon_beta
    }

    pub fn fallback(&self) -> Fallback {
        self.fallback
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Copy with a different support threshold.
    pub fn with_epsilon(&self, epsilon_beta: f64) -> Self {
        Self {
            epsilon_beta,
            ..self.clone()
        }
    }

    pub fn with_fallback(&self, fallback: Fallback) -> Self {
        Self {
            fallback,
            ..self.clone()
        }
    }

    pub fn visited(&self, s: &SeqState) -> bool {
        self.rows.contains_key(s)
    }

    pub fn visits(&self, s: &SeqState) -> u64 {
        self.visits.get(s).copied().unwrap_or(0)
    }

    pub fn n_visited_states(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, s: &SeqState) -> Option<&[f64]> {
        self.rows.get(s).map(|r| r.as_slice())
    }

    pub fn prob(&self, s: &SeqState, a: Token) -> f64 {
        match self.rows.get(s) {
            Some(row) => row[a],
            None => match self.fallback {
                Fallback::EmptySupport => 0.0,
                Fallback::InheritUniform => 1.0 / self.n_actions as f64,
            },
        }
    }

    pub fn support(&self, s: &SeqState) -> Vec<Token> {
        (0..self.n_actions)
            .filter(|&a| is_supported(self, s, a))
            .collect()
    }

    /// Support flags materialized over an enumeration.
    pub fn support_mask(&self, index: &StateIndex) -> SupportMask {
        let v = self.n_actions;
        let mut mask = vec![false; index.len() * v];
        for i in index.nonterminal() {
            let s = index.state(i);
            for a in 0..v {
                mask[i * v + a] = is_supported(self, s, a);
            }
        }
        SupportMask { n_actions: v, mask }
    }

    pub fn dump(&self) -> BehaviorDump {
        let mut rows: Vec<BehaviorDumpRow> = self
            .rows
            .iter()
            .map(|(s, probs)| BehaviorDumpRow {
                state: s.to_string(),
                visits: self.visits(s),
                probs: probs.clone(),
            })
            .collect();
        rows.sort_by(|a, b| a.state.cmp(&b.state));
        BehaviorDump {
            n_actions: self.n_actions,
            epsilon_beta: self.epsilon_beta,
            fallback: self.fallback,
            unvisited_states_use_fallback: true,
            rows,
        }
    }
}

pub fn is_supported(beta: &BehaviorPolicy, s: &SeqState, a: Token) -> bool {
    beta.prob(s, a) > beta.epsilon_beta
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BehaviorDumpRow {
    pub state: String,
    pub visits: u64,
    pub probs: Vec<f64>,
}

/// Inspection dump. The fallback rule is recorded because states absent
/// from the dataset have no empirical distribution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BehaviorDump {
    pub n_actions: usize,
    pub epsilon_beta: f64,
    pub fallback: Fallback,
    pub unvisited_states_use_fallback: bool,
    pub rows: Vec<BehaviorDumpRow>,
}

/// Dense per-(state, action) support flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    n_actions: usize,
    mask: Vec<bool>,
}

impl SupportMask {
    /// Every action supported everywhere.
    pub fn full(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            mask: vec![true; n_states * n_actions],
        }
    }

    pub fn from_flags(n_actions: usize, mask: Vec<bool>) -> Self {
        Self { n_actions, mask }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.mask.len() / self.n_actions
    }

    pub fn supported(&self, s: usize, a: Token) -> bool {
        self.mask[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[bool] {
        &self.mask[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn support(&self, s: usize) -> Vec<Token> {
        (0..self.n_actions).filter(|&a| self.supported(s, a)).collect()
    }

    pub fn is_empty_at(&self, s: usize) -> bool {
        !self.row(s).iter().any(|&b| b)
    }

    /// Whether the action that led into state `s` was supported. Roots count as supported.
    pub fn entered_supported(&self, index: &StateIndex, s: usize) -> bool {
        match (index.parent(s), index.last_action(s)) {
            (Some(p), Some(a)) => self.supported(p, a),
            _ => true,
        }
    }

    pub fn count_unsupported(&self, traj: &Trajectory) -> usize {
        traj.steps
            .iter()
            .filter(|st| !self.supported(st.state, st.action))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseLabel {
    Supported,
    Unsupported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub label: ResponseLabel,
    pub unsupported_count: usize,
}

pub fn classify_tokens(beta: &BehaviorPolicy, prompt: usize, tokens: &[Token]) -> Classification {
    let mut prefix = SeqState::root(prompt);
    let mut unsupported_count = 0;
    for &a in tokens {
        if !is_supported(beta, &prefix, a) {
            unsupported_count += 1;
        }
        prefix.tokens.push(a);
    }
    let label = if unsupported_count == 0 {
        ResponseLabel::Supported
    } else {
        ResponseLabel::Unsupported
    };
    Classification {
        label,
        unsupported_count,
    }
}

pub fn classify_response(beta: &BehaviorPolicy, traj: &Trajectory) -> Classification {
    classify_tokens(beta, traj.prompt, &traj.tokens())
}

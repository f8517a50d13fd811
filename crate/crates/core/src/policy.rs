//! Stochastic policies over an enumerated state space.
//!
//! A policy stores one action distribution per state index. Softmax policies
//! additionally keep their logit table so gradient methods can update it;
//! the probability table is always kept in sync with the logits.

use crate::error::{Error, Result};
use crate::seq_mdp::Token;

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Table,
    Softmax { logits: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    n_actions: usize,
    probs: Vec<f64>,
    repr: Representation,
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl StochasticPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
            repr: Representation::Table,
        }
    }

    pub fn from_table(n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_actions == 0 || probs.len() % n_actions != 0 {
            return Err(Error::DimensionMismatch {
                expected: n_actions,
                got: probs.len(),
            });
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidPolicy(format!("negative or non-finite entry in row {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self {
            n_actions,
            probs,
            repr: Representation::Table,
        })
    }

    pub fn from_logits(n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if n_actions == 0 || logits.len() % n_actions != 0 {
            return Err(Error::DimensionMismatch {
                expected: n_actions,
                got: logits.len(),
            });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        let mut probs = vec![0.0; logits.len()];
        for (l, p) in logits.chunks(n_actions).zip(probs.chunks_mut(n_actions)) {
            softmax_into(l, p);
        }
        Ok(Self {
            n_actions,
            probs,
            repr: Representation::Softmax { logits },
        })
    }

    /// One-hot policy choosing `choices[s]` at every state.
    pub fn deterministic(n_actions: usize, choices: &[Token]) -> Self {
        let mut probs = vec![0.0; choices.len() * n_actions];
        for (s, &a) in choices.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_actions,
            probs,
            repr: Representation::Table,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn representation(&self) -> &Representation {
        &self.repr
    }

    pub fn logits(&self) -> Option<&[f64]> {
        match &self.repr {
            Representation::Softmax { logits } => Some(logits),
            Representation::Table => None,
        }
    }

    /// Replaces the logits of a softmax policy and refreshes its probabilities.
    pub fn set_logits(&mut self, new_logits: &[f64]) -> Result<()> {
        if new_logits.len() != self.probs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.probs.len(),
                got: new_logits.len(),
            });
        }
        if new_logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        match &mut self.repr {
            Representation::Softmax { logits } => logits.copy_from_slice(new_logits),
            Representation::Table => {
                return Err(Error::InvalidPolicy("set_logits on a table policy".into()))
            }
        }
        let n = self.n_actions;
        for (l, p) in new_logits.chunks(n).zip(self.probs.chunks_mut(n)) {
            softmax_into(l, p);
        }
        Ok(())
    }

    /// Replaces one row of logits of a softmax policy.
    pub fn set_row_logits(&mut self, s: usize, row: &[f64]) -> Result<()> {
        let n = self.n_actions;
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: row.len(),
            });
        }
        if row.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("policy logits at state {s}")));
        }
        match &mut self.repr {
            Representation::Softmax { logits } => logits[s * n..(s + 1) * n].copy_from_slice(row),
            Representation::Table => {
                return Err(Error::InvalidPolicy("set_row_logits on a table policy".into()))
            }
        }
        softmax_into(row, &mut self.probs[s * n..(s + 1) * n]);
        Ok(())
    }

    pub fn row_logits(&self, s: usize) -> Option<&[f64]> {
        self.logits().map(|l| &l[s * self.n_actions..(s + 1) * self.n_actions])
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: Token) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn log_prob(&self, s: usize, a: Token) -> f64 {
        self.prob(s, a).ln()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Inverse-CDF draw from row `s` using a single uniform `u` in [0, 1).
    pub fn sample_with_uniform(&self, s: usize, u: f64) -> Token {
        sample_index(self.row(s), u)
    }

    /// The action each state places all its mass on, if the policy is one-hot.
    pub fn deterministic_choices(&self) -> Option<Vec<Token>> {
        self.probs
            .chunks(self.n_actions)
            .map(|row| {
                let hot: Vec<usize> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(a, _)| a)
                    .collect();
                (hot.len() == 1 && row[hot[0]] == 1.0).then(|| hot[0])
            })
            .collect()
    }
}

/// Inverse-CDF selection over an unnormalized-safe probability row.
pub fn sample_index(row: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

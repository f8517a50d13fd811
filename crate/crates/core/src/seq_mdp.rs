//! Token-level MDP.
//!
//! A state is a prompt id plus the tokens emitted so far. Emitting a token
//! appends it; the episode ends at the end-of-sequence token or when the
//! response reaches `max_len`. Only the terminal transition carries reward.
//! Terminal states are absorbing with value zero afterwards, which realizes
//! the discounted formulation on a finite tree.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{sample_index, StochasticPolicy};
use crate::rng::{stream, LabRng};

pub type Token = usize;

/// Default cap on the number of enumerated states.
pub const DEFAULT_STATE_CAP: u128 = 200_000;

const NO_CHILD: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    eos: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidMdp(format!("vocab size {size} < 2")));
        }
        if eos >= size {
            return Err(Error::InvalidMdp(format!("eos id {eos} out of range for vocab {size}")));
        }
        Ok(Self { size, eos })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqState {
    pub prompt: usize,
    pub tokens: Vec<Token>,
}

impl SeqState {
    pub fn root(prompt: usize) -> Self {
        Self {
            prompt,
            tokens: Vec::new(),
        }
    }

    pub fn new(prompt: usize, tokens: Vec<Token>) -> Self {
        Self { prompt, tokens }
    }

    pub fn last_token(&self) -> Option<Token> {
        self.tokens.last().copied()
    }

    pub fn child(&self, a: Token) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(a);
        Self {
            prompt: self.prompt,
            tokens,
        }
    }

    pub fn parent(&self) -> Option<Self> {
        if self.tokens.is_empty() {
            return None;
        }
        Some(Self {
            prompt: self.prompt,
            tokens: self.tokens[..self.tokens.len() - 1].to_vec(),
        })
    }
}

impl fmt::Display for SeqState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.prompt)?;
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Scores a terminal response. Implementations must be deterministic.
pub trait SequenceReward: Send + Sync {
    fn score(&self, prompt: usize, tokens: &[Token]) -> f64;
}

impl<F> SequenceReward for F
where
    F: Fn(usize, &[Token]) -> f64 + Send + Sync,
{
    fn score(&self, prompt: usize, tokens: &[Token]) -> f64 {
        self(prompt, tokens)
    }
}

/// Explicit reward table with a default for unlisted sequences.
#[derive(Debug, Clone, Default)]
pub struct TableReward {
    pub entries: HashMap<SeqState, f64>,
    pub default: f64,
}

impl SequenceReward for TableReward {
    fn score(&self, prompt: usize, tokens: &[Token]) -> f64 {
        if self.entries.is_empty() {
            return self.default;
        }
        self.entries
            .get(&SeqState::new(prompt, tokens.to_vec()))
            .copied()
            .unwrap_or(self.default)
    }
}

#[derive(Clone)]
pub struct TokenMdp {
    vocab: Vocab,
    mu: Vec<f64>,
    max_len: usize,
    gamma: f64,
    reward: Arc<dyn SequenceReward>,
    r_min: f64,
    r_max: f64,
}

impl fmt::Debug for TokenMdp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenMdp")
            .field("vocab", &self.vocab)
            .field("mu", &self.mu)
            .field("max_len", &self.max_len)
            .field("gamma", &self.gamma)
            .field("r_min", &self.r_min)
            .field("r_max", &self.r_max)
            .finish_non_exhaustive()
    }
}

impl TokenMdp {
    pub fn new(
        vocab: Vocab,
        mu: Vec<f64>,
        max_len: usize,
        gamma: f64,
        reward: Arc<dyn SequenceReward>,
        r_min: f64,
        r_max: f64,
    ) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidMdp("no prompts".into()));
        }
        if mu.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidMdp("negative prompt probability".into()));
        }
        let total: f64 = mu.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMdp(format!("prompt distribution sums to {total}")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside [0, 1)")));
        }
        if !(r_min <= r_max) {
            return Err(Error::InvalidMdp(format!("r_min {r_min} > r_max {r_max}")));
        }
        Ok(Self {
            vocab,
            mu,
            max_len,
            gamma,
            reward,
            r_min,
            r_max,
        })
    }

    /// Uniform prompt distribution over `n_prompts` prompts.
    pub fn uniform_prompts(n_prompts: usize) -> Vec<f64> {
        vec![1.0 / n_prompts as f64; n_prompts]
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn n_actions(&self) -> usize {
        self.vocab.size
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn n_prompts(&self) -> usize {
        self.mu.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn reward_fn(&self) -> &Arc<dyn SequenceReward> {
        &self.reward
    }

    /// Same structure with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.vocab,
            self.mu.clone(),
            self.max_len,
            gamma,
            self.reward.clone(),
            self.r_min,
            self.r_max,
        )
    }

    /// Same structure with a different reward function and bounds.
    pub fn with_reward(&self, reward: Arc<dyn SequenceReward>, r_min: f64, r_max: f64) -> Result<Self> {
        Self::new(
            self.vocab,
            self.mu.clone(),
            self.max_len,
            self.gamma,
            reward,
            r_min,
            r_max,
        )
    }

    pub fn validate_state(&self, s: &SeqState) -> Result<()> {
        if s.prompt >= self.mu.len() {
            return Err(Error::InvalidState(format!("prompt {} out of range", s.prompt)));
        }
        if s.tokens.len() > self.max_len {
            return Err(Error::InvalidState(format!(
                "{s} longer than max_len {}",
                self.max_len
            )));
        }
        for (i, &t) in s.tokens.iter().enumerate() {
            if t >= self.vocab.size {
                return Err(Error::InvalidState(format!("{s} has token {t} outside vocab")));
            }
            if t == self.vocab.eos && i + 1 != s.tokens.len() {
                return Err(Error::InvalidState(format!("{s} continues after eos")));
            }
        }
        Ok(())
    }

    pub fn is_terminal(&self, s: &SeqState) -> bool {
        s.tokens.len() >= self.max_len || s.last_token() == Some(self.vocab.eos)
    }

    /// Reward of a terminal state, checked against the declared bounds.
    pub fn terminal_reward(&self, s: &SeqState) -> Result<f64> {
        let value = self.reward.score(s.prompt, &s.tokens);
        if !(value >= self.r_min && value <= self.r_max) {
            return Err(Error::RewardOutOfBounds {
                state: s.to_string(),
                value,
                r_min: self.r_min,
                r_max: self.r_max,
            });
        }
        Ok(value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next: SeqState,
    pub reward: f64,
    pub terminal: bool,
}

/// Appends `a` to `s`. Reward is paid only when the successor is terminal.
pub fn step(mdp: &TokenMdp, s: &SeqState, a: Token) -> Result<Transition> {
    mdp.validate_state(s)?;
    if mdp.is_terminal(s) {
        return Err(Error::SteppedTerminal(s.to_string()));
    }
    if a >= mdp.vocab.size {
        return Err(Error::InvalidState(format!("token {a} outside vocab")));
    }
    let next = s.child(a);
    let terminal = mdp.is_terminal(&next);
    let reward = if terminal { mdp.terminal_reward(&next)? } else { 0.0 };
    Ok(Transition {
        next,
        reward,
        terminal,
    })
}

/// Every reachable state, ordered by response length.
#[derive(Debug, Clone)]
pub struct StateIndex {
    n_actions: usize,
    eos: Token,
    max_len: usize,
    states: Vec<SeqState>,
    terminal: Vec<bool>,
    parent: Vec<usize>,
    children: Vec<usize>,
    roots: Vec<usize>,
    lookup: HashMap<SeqState, usize>,
}

/// Exact number of reachable states for the given shape.
pub fn count_states(vocab_size: usize, max_len: usize, n_prompts: usize) -> u128 {
    let v = vocab_size as u128;
    let mut frontier = n_prompts as u128;
    let mut total = frontier;
    for _ in 0..max_len {
        // Every non-terminal state has v children; eos children are terminal.
        let expand = frontier;
        let next = expand.saturating_mul(v);
        total = total.saturating_add(next);
        frontier = expand.saturating_mul(v - 1);
    }
    total
}

pub fn enumerate_states(mdp: &TokenMdp, cap: u128) -> Result<StateIndex> {
    let needed = count_states(mdp.vocab.size, mdp.max_len, mdp.n_prompts());
    if needed > cap {
        return Err(Error::CapExceeded { needed, cap });
    }
    let v = mdp.vocab.size;
    let n = needed as usize;
    let mut states = Vec::with_capacity(n);
    let mut terminal = Vec::with_capacity(n);
    let mut parent = Vec::with_capacity(n);
    let mut roots = Vec::with_capacity(mdp.n_prompts());
    for p in 0..mdp.n_prompts() {
        let s = SeqState::root(p);
        roots.push(states.len());
        terminal.push(mdp.is_terminal(&s));
        states.push(s);
        parent.push(NO_CHILD);
    }
    let mut children = vec![NO_CHILD; n * v];
    let mut cursor = 0;
    while cursor < states.len() {
        if !terminal[cursor] {
            for a in 0..v {
                let child = states[cursor].child(a);
                children[cursor * v + a] = states.len();
                terminal.push(mdp.is_terminal(&child));
                states.push(child);
                parent.push(cursor);
            }
        }
        cursor += 1;
    }
    debug_assert_eq!(states.len(), n);
    let lookup = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    Ok(StateIndex {
        n_actions: v,
        eos: mdp.vocab.eos,
        max_len: mdp.max_len,
        states,
        terminal,
        parent,
        children,
        roots,
        lookup,
    })
}

impl StateIndex {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn state(&self, i: usize) -> &SeqState {
        &self.states[i]
    }

    pub fn states(&self) -> &[SeqState] {
        &self.states
    }

    pub fn id_of(&self, s: &SeqState) -> Option<usize> {
        self.lookup.get(s).copied()
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.terminal[i]
    }

    pub fn depth(&self, i: usize) -> usize {
        self.states[i].tokens.len()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        let p = self.parent[i];
        (p != NO_CHILD).then_some(p)
    }

    /// Token that led into state `i`, if it is not a root.
    pub fn last_action(&self, i: usize) -> Option<Token> {
        self.states[i].last_token()
    }

    pub fn child(&self, i: usize, a: Token) -> Option<usize> {
        let c = self.children[i * self.n_actions + a];
        (c != NO_CHILD).then_some(c)
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn root(&self, prompt: usize) -> usize {
        self.roots[prompt]
    }

    pub fn nonterminal(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| !self.terminal[i])
    }
}

/// MDP together with its enumeration and materialized terminal rewards.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    mdp: TokenMdp,
    index: Arc<StateIndex>,
    reward: Vec<f64>,
}

impl TabularMdp {
    pub fn build(mdp: TokenMdp, cap: u128) -> Result<Self> {
        let index = Arc::new(enumerate_states(&mdp, cap)?);
        Self::with_index(mdp, index)
    }

    /// Reuses an enumeration built for another MDP of the same shape.
    pub fn with_index(mdp: TokenMdp, index: Arc<StateIndex>) -> Result<Self> {
        if index.n_actions() != mdp.n_actions() || index.roots().len() != mdp.n_prompts() {
            return Err(Error::DimensionMismatch {
                expected: mdp.n_actions(),
                got: index.n_actions(),
            });
        }
        let mut reward = vec![0.0; index.len()];
        for i in 0..index.len() {
            if index.is_terminal(i) {
                reward[i] = mdp.terminal_reward(index.state(i))?;
            }
        }
        Ok(Self { mdp, index, reward })
    }

    pub fn mdp(&self) -> &TokenMdp {
        &self.mdp
    }

    pub fn index(&self) -> &StateIndex {
        &self.index
    }

    pub fn shared_index(&self) -> Arc<StateIndex> {
        self.index.clone()
    }

    pub fn n_states(&self) -> usize {
        self.index.len()
    }

    pub fn n_actions(&self) -> usize {
        self.index.n_actions()
    }

    pub fn gamma(&self) -> f64 {
        self.mdp.gamma
    }

    /// Per-state reward: the terminal score at terminal states, zero elsewhere.
    pub fn state_rewards(&self) -> &[f64] {
        &self.reward
    }

    /// r(s, a): reward for emitting `a` at non-terminal `s`.
    pub fn transition_reward(&self, s: usize, a: Token) -> f64 {
        match self.index.child(s, a) {
            Some(c) => self.reward[c],
            None => 0.0,
        }
    }

    pub fn next(&self, s: usize, a: Token) -> usize {
        self.index
            .child(s, a)
            .expect("transition from a terminal state")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajStep {
    pub state: usize,
    pub action: Token,
    pub reward: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    pub steps: Vec<TrajStep>,
    pub final_state: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn final_seq(&self) -> SeqState {
        SeqState::new(self.prompt, self.tokens())
    }
}

pub fn sample_prompt(mu: &[f64], u: f64) -> usize {
    sample_index(mu, u)
}

/// Rolls out `policy` from `prompt`, drawing exactly one uniform per token.
pub fn rollout_from(
    tab: &TabularMdp,
    policy: &StochasticPolicy,
    prompt: usize,
    rng: &mut LabRng,
) -> Trajectory {
    let index = tab.index();
    let mut s = index.root(prompt);
    let mut steps = Vec::with_capacity(index.max_len());
    while !index.is_terminal(s) {
        let u: f64 = rng.random();
        let a = policy.sample_with_uniform(s, u);
        let next = tab.next(s, a);
        steps.push(TrajStep {
            state: s,
            action: a,
            reward: tab.state_rewards()[next],
            log_prob: policy.log_prob(s, a),
        });
        s = next;
    }
    Trajectory {
        prompt,
        steps,
        final_state: s,
    }
}

/// Seeded rollout: the prompt is drawn from mu, then tokens from `policy`.
pub fn rollout(tab: &TabularMdp, policy: &StochasticPolicy, rng_seed: u64) -> Trajectory {
    let mut prompt_rng = stream(rng_seed, &[0]);
    let prompt = sample_prompt(tab.mdp().mu(), prompt_rng.random());
    let mut rng = stream(rng_seed, &[1]);
    rollout_from(tab, policy, prompt, &mut rng)
}

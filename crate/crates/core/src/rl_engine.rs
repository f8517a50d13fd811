//! PPO on a tabular softmax policy with a tabular critic.
//!
//! One training step collects a batch of responses, shapes the rewards with
//! the reference-policy KL term, builds critic targets, computes GAE
//! advantages, takes a few clipped-surrogate ascent steps on the logits and
//! then regresses the critic. The behavior-supported variant replaces the
//! critic target of every state entered through an unsupported token with
//! the constant `v_min`. Baselines differ only in how the reward model score
//! is formed or how advantages are mixed.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::{BehaviorPolicy, SupportMask, DEFAULT_EPSILON_BETA};
use crate::error::{Error, Result};
pub use crate::metrics_io::{RunLog, RunRow};
use crate::policy::StochasticPolicy;
use crate::rng::stream;
use crate::seq_mdp::{rollout_from, sample_prompt, SequenceReward, TabularMdp, Token};
use crate::supported_pi::occupancy;
use crate::value_ops::DEFAULT_V_MIN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    /// Per-token KL coefficient nu.
    pub kl_coef: f64,
    pub epsilon_beta: f64,
    pub v_min: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Responses per training step.
    pub batch_prompts: usize,
    pub epochs_per_batch: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Variance weight of the uncertainty-weighted ensemble.
    pub uwo_lambda: f64,
    /// Step size of the constrained variant's multiplier.
    pub cppo_eta: f64,
    /// Proxy threshold of the constrained variant.
    pub cppo_threshold: Option<f64>,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            kl_coef: 0.0,
            epsilon_beta: DEFAULT_EPSILON_BETA,
            v_min: DEFAULT_V_MIN,
            lr_actor: 1.0,
            lr_critic: 0.1,
            batch_prompts: 64,
            epochs_per_batch: 4,
            total_steps: 200,
            seed: 0,
            uwo_lambda: 1.0,
            cppo_eta: 0.05,
            cppo_threshold: None,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("rl.{field}"), msg))
            }
        };
        check((0.0..=1.0).contains(&self.gamma), "gamma", "must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.lambda_gae), "lambda_gae", "must lie in [0, 1]")?;
        check(self.clip_eps > 0.0 && self.clip_eps < 1.0, "clip_eps", "must lie in (0, 1)")?;
        check(self.kl_coef >= 0.0, "kl_coef", "must be >= 0")?;
        check(self.epsilon_beta >= 0.0, "epsilon_beta", "must be >= 0")?;
        check(self.v_min.is_finite(), "v_min", "must be finite")?;
        check(self.lr_actor > 0.0, "lr_actor", "must be > 0")?;
        check(self.lr_critic > 0.0, "lr_critic", "must be > 0")?;
        check(self.batch_prompts > 0, "batch_prompts", "must be > 0")?;
        check(self.epochs_per_batch > 0, "epochs_per_batch", "must be > 0")?;
        check(self.uwo_lambda >= 0.0, "uwo_lambda", "must be >= 0")?;
        check(self.cppo_eta > 0.0, "cppo_eta", "must be > 0")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bspo,
    StandardPpo,
    KlPpo,
    EnsUwo,
    EnsWco,
    Cppo,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Bspo,
        Variant::StandardPpo,
        Variant::KlPpo,
        Variant::EnsUwo,
        Variant::EnsWco,
        Variant::Cppo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bspo => "bspo",
            Variant::StandardPpo => "standard_ppo",
            Variant::KlPpo => "kl_ppo",
            Variant::EnsUwo => "ens_uwo",
            Variant::EnsWco => "ens_wco",
            Variant::Cppo => "cppo",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Variant::EnsUwo | Variant::EnsWco)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Combine {
    /// Mean minus `lambda` times the population variance.
    Uwo { lambda: f64 },
    /// Pointwise minimum.
    Wco,
}

pub fn combine_scores(scores: &[f64], mode: Combine) -> f64 {
    match mode {
        Combine::Wco => scores.iter().cloned().fold(f64::INFINITY, f64::min),
        Combine::Uwo { lambda } => {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            mean - lambda * var
        }
    }
}

pub struct EnsembleReward {
    pub members: Vec<Arc<dyn SequenceReward>>,
    pub mode: Combine,
}

impl SequenceReward for EnsembleReward {
    fn score(&self, prompt: usize, tokens: &[Token]) -> f64 {
        let scores: Vec<f64> = self.members.iter().map(|m| m.score(prompt, tokens)).collect();
        combine_scores(&scores, self.mode)
    }
}

/// Per-state value estimates; terminal entries stay at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTable {
    values: Vec<f64>,
    terminal: Vec<bool>,
}

impl CriticTable {
    pub fn zeros(tab: &TabularMdp) -> Self {
        let index = tab.index();
        Self {
            values: vec![0.0; tab.n_states()],
            terminal: (0..tab.n_states()).map(|s| index.is_terminal(s)).collect(),
        }
    }

    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }

    pub fn set(&mut self, s: usize, v: f64) {
        if !self.terminal[s] {
            self.values[s] = v;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStep {
    pub state: usize,
    pub action: Token,
    pub next: usize,
    pub old_log_prob: f64,
    /// Shaped reward.
    pub reward: f64,
    pub advantage: f64,
    pub target: f64,
    /// The token that led into `state` was supported (always true at roots).
    pub entered_supported: bool,
    pub action_supported: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prompt: usize,
    pub steps: Vec<BatchStep>,
    pub final_state: usize,
}

impl Episode {
    pub fn tokens(&self) -> Vec<Token> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Episode>,
}

impl TrajectoryBatch {
    pub fn n_tokens(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &BatchStep> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }

    pub fn steps_mut(&mut self) -> impl Iterator<Item = &mut BatchStep> {
        self.episodes.iter_mut().flat_map(|e| e.steps.iter_mut())
    }
}

/// Samples `n` responses from `pi`. Response `b` of step `step` draws its
/// prompt and tokens from the stream `(seed, step, b)`.
pub fn collect_batch(
    tab: &TabularMdp,
    pi: &StochasticPolicy,
    mask: &SupportMask,
    n: usize,
    seed: u64,
    step: u64,
) -> TrajectoryBatch {
    let episodes = (0..n as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, &[step, b]);
            let prompt = sample_prompt(tab.mdp().mu(), rng.random());
            let traj = rollout_from(tab, pi, prompt, &mut rng);
            let mut entered = true;
            let steps = traj
                .steps
                .iter()
                .map(|t| {
                    let supported = mask.supported(t.state, t.action);
                    let step = BatchStep {
                        state: t.state,
                        action: t.action,
                        next: tab.next(t.state, t.action),
                        old_log_prob: t.log_prob,
                        reward: 0.0,
                        advantage: 0.0,
                        target: 0.0,
                        entered_supported: entered,
                        action_supported: supported,
                    };
                    entered = supported;
                    step
                })
                .collect();
            Episode {
                prompt,
                steps,
                final_state: traj.final_state,
            }
        })
        .collect();
    TrajectoryBatch { episodes }
}

/// Sets every step's reward to `nu * (log pi_ref - log pi_old)` and adds the
/// episode's reward-model score on its final step.
pub fn shape_rewards_with(batch: &mut TrajectoryBatch, rm_scores: &[f64], pi_ref: &StochasticPolicy, nu: f64) {
    for (ep, &rm) in batch.episodes.iter_mut().zip(rm_scores) {
        let last = ep.steps.len().saturating_sub(1);
        for (t, step) in ep.steps.iter_mut().enumerate() {
            let kl = if nu == 0.0 {
                0.0
            } else {
                nu * (pi_ref.log_prob(step.state, step.action) - step.old_log_prob)
            };
            step.reward = kl + if t == last { rm } else { 0.0 };
        }
    }
}

pub fn shape_rewards(batch: &mut TrajectoryBatch, proxy: &dyn SequenceReward, pi_ref: &StochasticPolicy, nu: f64) {
    let scores: Vec<f64> = batch
        .episodes
        .iter()
        .map(|e| proxy.score(e.prompt, &e.tokens()))
        .collect();
    shape_rewards_with(batch, &scores, pi_ref, nu);
}

/// Value of the successor of `step`. With a floor, a terminal successor
/// reached through an unsupported token is worth the floor instead of zero.
fn successor_value(step: &BatchStep, is_last: bool, critic: &CriticTable, floor: Option<f64>) -> f64 {
    match (is_last, floor) {
        (true, Some(v_min)) if !step.action_supported => v_min,
        (true, _) => 0.0,
        (false, _) => critic.get(step.next),
    }
}

/// Backward recursion A_t = delta_t + gamma * lambda * A_{t+1}.
pub fn gae_advantages(batch: &mut TrajectoryBatch, critic: &CriticTable, gamma: f64, lambda: f64, floor: Option<f64>) {
    for ep in &mut batch.episodes {
        let n = ep.steps.len();
        let mut next_adv = 0.0;
        for t in (0..n).rev() {
            let step = &ep.steps[t];
            let delta = step.reward + gamma * successor_value(step, t + 1 == n, critic, floor) - critic.get(step.state);
            next_adv = delta + gamma * lambda * next_adv;
            ep.steps[t].advantage = next_adv;
        }
    }
}

/// One-step temporal-difference targets r + gamma * V(next).
pub fn critic_targets_td(batch: &mut TrajectoryBatch, critic: &CriticTable, gamma: f64) {
    for ep in &mut batch.episodes {
        let n = ep.steps.len();
        for t in 0..n {
            let v_next = successor_value(&ep.steps[t], t + 1 == n, critic, None);
            ep.steps[t].target = ep.steps[t].reward + gamma * v_next;
        }
    }
}

/// Temporal-difference targets, except that a state entered through an
/// unsupported token regresses onto `v_min`.
pub fn critic_targets_bspo(batch: &mut TrajectoryBatch, critic: &CriticTable, gamma: f64, v_min: f64) {
    for ep in &mut batch.episodes {
        let n = ep.steps.len();
        for t in 0..n {
            let step = &ep.steps[t];
            ep.steps[t].target = if step.entered_supported {
                step.reward + gamma * successor_value(step, t + 1 == n, critic, Some(v_min))
            } else {
                v_min
            };
        }
    }
}

/// Mean squared error of the critic against the stored targets, with its
/// gradient per state.
pub fn critic_loss(critic: &CriticTable, batch: &TrajectoryBatch) -> (f64, BTreeMap<usize, f64>) {
    let n = batch.n_tokens() as f64;
    let mut loss = 0.0;
    let mut grad: BTreeMap<usize, f64> = BTreeMap::new();
    for step in batch.steps() {
        let err = critic.get(step.state) - step.target;
        loss += err * err;
        *grad.entry(step.state).or_default() += 2.0 * err / n;
    }
    (loss / n, grad)
}

/// Per-sample stochastic gradient descent on the squared error, visiting
/// steps in batch order.
pub fn train_critic(critic: &mut CriticTable, batch: &TrajectoryBatch, lr: f64, epochs: usize) -> Result<()> {
    for _ in 0..epochs {
        for step in batch.steps() {
            let v = critic.get(step.state);
            critic.set(step.state, v - lr * 2.0 * (v - step.target));
        }
    }
    if critic.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("critic values".into()));
    }
    Ok(())
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)` and whether the unclipped
/// branch is the active one (ties count as unclipped).
pub fn clipped_objective(rho: f64, adv: f64, clip_eps: f64) -> (f64, bool) {
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// Clipped surrogate averaged over every token in the batch, with its
/// gradient with respect to the logits of each visited state.
pub fn ppo_surrogate(
    batch: &TrajectoryBatch,
    pi: &StochasticPolicy,
    clip_eps: f64,
) -> (f64, BTreeMap<usize, Vec<f64>>) {
    let n = batch.n_tokens() as f64;
    let v = pi.n_actions();
    let mut total = 0.0;
    let mut grad: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for step in batch.steps() {
        let rho = (pi.log_prob(step.state, step.action) - step.old_log_prob).exp();
        let (obj, active) = clipped_objective(rho, step.advantage, clip_eps);
        total += obj;
        let g = grad.entry(step.state).or_insert_with(|| vec![0.0; v]);
        if active && step.advantage != 0.0 {
            // d rho / d logit_b = rho * (1[b = a] - pi(b|s))
            let scale = rho * step.advantage / n;
            for (b, gb) in g.iter_mut().enumerate() {
                let onehot = if b == step.action { 1.0 } else { 0.0 };
                *gb += scale * (onehot - pi.prob(step.state, b));
            }
        }
    }
    (total / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoTrace {
    /// Surrogate value before each ascent step.
    pub surrogate: Vec<f64>,
}

/// `epochs` full-batch gradient-ascent steps on the clipped surrogate.
pub fn ppo_update(
    batch: &TrajectoryBatch,
    pi: &mut StochasticPolicy,
    clip_eps: f64,
    lr: f64,
    epochs: usize,
) -> Result<PpoTrace> {
    if pi.logits().is_none() {
        return Err(Error::InvalidPolicy("ppo_update needs a softmax policy".into()));
    }
    let mut surrogate = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (obj, grad) = ppo_surrogate(batch, pi, clip_eps);
        if !obj.is_finite() {
            return Err(Error::NonFinite("ppo surrogate".into()));
        }
        surrogate.push(obj);
        for (s, g) in grad {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let row: Vec<f64> = pi
                .row_logits(s)
                .expect("softmax policy")
                .iter()
                .zip(&g)
                .map(|(l, gl)| l + lr * gl)
                .collect();
            pi.set_row_logits(s, &row)?;
        }
    }
    Ok(PpoTrace { surrogate })
}

/// Everything a run needs besides its configuration.
#[derive(Clone)]
pub struct RunContext {
    pub tab: Arc<TabularMdp>,
    pub beta: Arc<BehaviorPolicy>,
    /// Initial and reference policy (softmax).
    pub pi0: StochasticPolicy,
    /// Gold score per state (zero at non-terminal states).
    pub gold_terminal: Vec<f64>,
    /// Score of every ensemble member per state; member 0 is the proxy.
    pub proxy_terminal: Vec<Vec<f64>>,
}

/// Score of `reward` at every terminal state, zero elsewhere.
pub fn terminal_scores(tab: &TabularMdp, reward: &dyn SequenceReward) -> Vec<f64> {
    let index = tab.index();
    (0..tab.n_states())
        .into_par_iter()
        .map(|s| {
            if index.is_terminal(s) {
                let st = index.state(s);
                reward.score(st.prompt, &st.tokens)
            } else {
                0.0
            }
        })
        .collect()
}

impl RunContext {
    pub fn new(
        tab: Arc<TabularMdp>,
        beta: Arc<BehaviorPolicy>,
        pi0: StochasticPolicy,
        gold: &dyn SequenceReward,
        proxies: &[&dyn SequenceReward],
    ) -> Result<Self> {
        if proxies.is_empty() {
            return Err(Error::config("proxies", "at least one proxy is required"));
        }
        if pi0.logits().is_none() || pi0.n_states() != tab.n_states() {
            return Err(Error::InvalidPolicy("initial policy must be softmax over all states".into()));
        }
        let gold_terminal = terminal_scores(&tab, gold);
        let proxy_terminal = proxies.iter().map(|p| terminal_scores(&tab, *p)).collect();
        Ok(Self {
            tab,
            beta,
            pi0,
            gold_terminal,
            proxy_terminal,
        })
    }

    /// Reward-model score per state used for optimization by `variant`.
    pub fn rm_terminal(&self, variant: Variant, cfg: &RlConfig) -> Result<Vec<f64>> {
        let mode = match variant {
            Variant::EnsUwo => Combine::Uwo { lambda: cfg.uwo_lambda },
            Variant::EnsWco => Combine::Wco,
            _ => return Ok(self.proxy_terminal[0].clone()),
        };
        if self.proxy_terminal.len() < 2 {
            return Err(Error::config("proxies", "ensemble variants need at least two members"));
        }
        Ok((0..self.tab.n_states())
            .map(|s| {
                let scores: Vec<f64> = self.proxy_terminal.iter().map(|p| p[s]).collect();
                combine_scores(&scores, mode)
            })
            .collect())
    }
}

/// Exact expectations under `pi`: reward-model score, gold score, sequence
/// KL to the reference, unsupported tokens and response length.
pub fn policy_metrics(
    tab: &TabularMdp,
    pi: &StochasticPolicy,
    pi_ref: &StochasticPolicy,
    mask: &SupportMask,
    rm_terminal: &[f64],
    gold_terminal: &[f64],
    step: usize,
) -> RunRow {
    let index = tab.index();
    let occ = occupancy(tab, pi);
    let mut row = RunRow {
        step,
        proxy_reward_mean: 0.0,
        gold_reward_mean: 0.0,
        kl_to_ref: 0.0,
        unsupported_per_response: 0.0,
        mean_length: 0.0,
    };
    for (s, &w) in occ.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        if index.is_terminal(s) {
            row.proxy_reward_mean += w * rm_terminal[s];
            row.gold_reward_mean += w * gold_terminal[s];
            continue;
        }
        row.mean_length += w;
        for a in 0..tab.n_actions() {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            row.kl_to_ref += w * p * (p.ln() - pi_ref.log_prob(s, a));
            if !mask.supported(s, a) {
                row.unsupported_per_response += w * p;
            }
        }
    }
    row
}

/// Proxy level at the gold peak of a prior run, minus `margin_frac` of the
/// run's proxy range.
pub fn cppo_threshold(prior: &RunLog, margin_frac: f64) -> Result<f64> {
    let gold = prior.gold();
    let proxy = prior.proxy();
    if gold.is_empty() {
        return Err(Error::EmptyPartition("prior run rows"));
    }
    let peak = (0..gold.len()).fold(0, |best, i| if gold[i] > gold[best] { i } else { best });
    let max = proxy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = proxy.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(proxy[peak] - margin_frac * (max - min))
}

pub fn run_bspo(cfg: &RlConfig, ctx: &RunContext) -> Result<RunLog> {
    run_variant(cfg, Variant::Bspo, ctx)
}

pub fn run_baseline(cfg: &RlConfig, variant: Variant, ctx: &RunContext) -> Result<RunLog> {
    if variant == Variant::Bspo {
        return Err(Error::config("variant", "bspo is not a baseline"));
    }
    run_variant(cfg, variant, ctx)
}

pub fn run_variant(cfg: &RlConfig, variant: Variant, ctx: &RunContext) -> Result<RunLog> {
    run_variant_with_policy(cfg, variant, ctx).map(|(log, _)| log)
}

/// Like [`run_variant`], also returning the final policy.
pub fn run_variant_with_policy(cfg: &RlConfig, variant: Variant, ctx: &RunContext) -> Result<(RunLog, StochasticPolicy)> {
    cfg.validate()?;
    let nu = match variant {
        Variant::StandardPpo => 0.0,
        Variant::KlPpo if cfg.kl_coef <= 0.0 => {
            return Err(Error::config("rl.kl_coef", "kl_ppo needs kl_coef > 0"));
        }
        _ => cfg.kl_coef,
    };
    let threshold = match (variant, cfg.cppo_threshold) {
        (Variant::Cppo, None) => return Err(Error::config("rl.cppo_threshold", "cppo needs a threshold")),
        (_, t) => t.unwrap_or(0.0),
    };
    let tab = &*ctx.tab;
    let mask = ctx.beta.with_epsilon(cfg.epsilon_beta).support_mask(tab.index());
    let rm_terminal = ctx.rm_terminal(variant, cfg)?;
    let pi_ref = &ctx.pi0;
    let mut pi = ctx.pi0.clone();
    let mut critic = CriticTable::zeros(tab);
    let mut critic_kl = CriticTable::zeros(tab);
    let mut multiplier = 0.0f64;
    let mut log = RunLog::new(variant.name(), cfg.seed);
    let metrics = |pi: &StochasticPolicy, step| policy_metrics(tab, pi, pi_ref, &mask, &rm_terminal, &ctx.gold_terminal, step);
    log.rows.push(metrics(&pi, 0));
    for step in 0..cfg.total_steps {
        let mut batch = collect_batch(tab, &pi, &mask, cfg.batch_prompts, cfg.seed, step as u64);
        let scores: Vec<f64> = batch.episodes.iter().map(|e| rm_terminal[e.final_state]).collect();
        if variant == Variant::Cppo {
            // Task stream: the reference KL term alone.
            let zeros = vec![0.0; scores.len()];
            let mut kl_batch = batch.clone();
            shape_rewards_with(&mut kl_batch, &zeros, pi_ref, 1.0);
            critic_targets_td(&mut kl_batch, &critic_kl, cfg.gamma);
            gae_advantages(&mut kl_batch, &critic_kl, cfg.gamma, cfg.lambda_gae, None);
            shape_rewards_with(&mut batch, &scores, pi_ref, 0.0);
            critic_targets_td(&mut batch, &critic, cfg.gamma);
            gae_advantages(&mut batch, &critic, cfg.gamma, cfg.lambda_gae, None);
            for (rm_step, kl_step) in batch.steps_mut().zip(kl_batch.steps()) {
                rm_step.advantage = (1.0 - multiplier) * kl_step.advantage + multiplier * rm_step.advantage;
            }
            train_critic(&mut critic_kl, &kl_batch, cfg.lr_critic, cfg.epochs_per_batch)?;
            let v_rm = scores.iter().sum::<f64>() / scores.len() as f64;
            multiplier = (multiplier - cfg.cppo_eta * (v_rm - threshold)).clamp(-1.0, 1.0);
        } else {
            shape_rewards_with(&mut batch, &scores, pi_ref, nu);
            if variant == Variant::Bspo {
                critic_targets_bspo(&mut batch, &critic, cfg.gamma, cfg.v_min);
                gae_advantages(&mut batch, &critic, cfg.gamma, cfg.lambda_gae, Some(cfg.v_min));
            } else {
                critic_targets_td(&mut batch, &critic, cfg.gamma);
                gae_advantages(&mut batch, &critic, cfg.gamma, cfg.lambda_gae, None);
            }
        }
        if batch.steps().any(|s| !s.advantage.is_finite()) {
            return Err(Error::NonFinite(format!("advantages at step {step}")));
        }
        ppo_update(&batch, &mut pi, cfg.clip_eps, cfg.lr_actor, cfg.epochs_per_batch)?;
        train_critic(&mut critic, &batch, cfg.lr_critic, cfg.epochs_per_batch)?;
        log.rows.push(metrics(&pi, step + 1));
    }
    Ok((log, pi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{fit_behavior, SequenceDataset};
    use crate::seq_mdp::{SeqState, TableReward, TokenMdp, Vocab, DEFAULT_STATE_CAP};
    use crate::value_ops::{solve_v_fixed_point, SolveOptions, ValueBounds};
    use std::collections::HashMap;

    fn tiny() -> TabularMdp {
        let mdp = TokenMdp::new(
            Vocab::new(3, 2).unwrap(),
            vec![1.0],
            3,
            0.9,
            Arc::new(TableReward {
                entries: HashMap::new(),
                default: 0.0,
            }),
            -1.0,
            1.0,
        )
        .unwrap();
        TabularMdp::build(mdp, DEFAULT_STATE_CAP).unwrap()
    }

    fn random_logits(tab: &TabularMdp, seed: u64) -> StochasticPolicy {
        let mut rng = stream(seed, &[]);
        let logits = (0..tab.n_states() * tab.n_actions())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        StochasticPolicy::from_logits(tab.n_actions(), logits).unwrap()
    }

    fn batch(tab: &TabularMdp, pi: &StochasticPolicy, n: usize, seed: u64) -> TrajectoryBatch {
        collect_batch(tab, pi, &SupportMask::full(tab.n_states(), 3), n, seed, 0)
    }

    #[test]
    fn shaping_zero_nu_and_same_policy() {
        let tab = tiny();
        let pi = random_logits(&tab, 1);
        let mut b = batch(&tab, &pi, 8, 2);
        let scores: Vec<f64> = (0..8).map(|i| i as f64).collect();
        shape_rewards_with(&mut b, &scores, &random_logits(&tab, 3), 0.0);
        for (ep, &s) in b.episodes.iter().zip(&scores) {
            let total: f64 = ep.steps.iter().map(|t| t.reward).sum();
            assert_eq!(total, s);
        }
        shape_rewards_with(&mut b, &scores, &pi, 0.7);
        for (ep, &s) in b.episodes.iter().zip(&scores) {
            let n = ep.steps.len();
            assert!(ep.steps[..n - 1].iter().all(|t| t.reward == 0.0));
            assert_eq!(ep.steps[n - 1].reward, s);
        }
    }

    #[test]
    fn shaping_matches_recomputation() {
        let tab = tiny();
        let pi = random_logits(&tab, 4);
        let pi_ref = random_logits(&tab, 5);
        let mut b = batch(&tab, &pi, 16, 6);
        let scores: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        shape_rewards_with(&mut b, &scores, &pi_ref, 0.3);
        for (ep, &score) in b.episodes.iter().zip(&scores) {
            for (t, step) in ep.steps.iter().enumerate() {
                let kl = pi_ref.prob(step.state, step.action).ln() - pi.prob(step.state, step.action).ln();
                let want = 0.3 * kl + if t + 1 == ep.steps.len() { score } else { 0.0 };
                assert!((step.reward - want).abs() < 1e-12);
            }
        }
    }

    fn critic_random(tab: &TabularMdp, seed: u64) -> CriticTable {
        let mut c = CriticTable::zeros(tab);
        let mut rng = stream(seed, &[]);
        for s in 0..tab.n_states() {
            c.set(s, rng.random_range(-2.0..2.0));
        }
        c
    }

    #[test]
    fn gae_lambda_limits() {
        let tab = tiny();
        let pi = random_logits(&tab, 7);
        let mut b = batch(&tab, &pi, 16, 8);
        let scores: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        shape_rewards_with(&mut b, &scores, &random_logits(&tab, 9), 0.2);
        let critic = critic_random(&tab, 10);
        let gamma = 0.9;
        gae_advantages(&mut b, &critic, gamma, 0.0, None);
        for ep in &b.episodes {
            let n = ep.steps.len();
            for (t, s) in ep.steps.iter().enumerate() {
                let next = if t + 1 == n { 0.0 } else { critic.get(s.next) };
                assert_eq!(s.advantage, s.reward + gamma * next - critic.get(s.state));
            }
        }
        gae_advantages(&mut b, &critic, gamma, 1.0, None);
        for ep in &b.episodes {
            for (t, s) in ep.steps.iter().enumerate() {
                let ret: f64 = ep.steps[t..]
                    .iter()
                    .enumerate()
                    .map(|(k, x)| gamma.powi(k as i32) * x.reward)
                    .sum();
                assert!((s.advantage - (ret - critic.get(s.state))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_single_step_episode() {
        let tab = tiny();
        let eos_first = StochasticPolicy::from_logits(3, {
            let mut l = vec![0.0; tab.n_states() * 3];
            for s in 0..tab.n_states() {
                l[s * 3 + 2] = 50.0;
            }
            l
        })
        .unwrap();
        let mut b = batch(&tab, &eos_first, 4, 1);
        assert!(b.episodes.iter().all(|e| e.steps.len() == 1));
        shape_rewards_with(&mut b, &[1.0, 2.0, 3.0, 4.0], &eos_first, 0.0);
        let critic = critic_random(&tab, 2);
        gae_advantages(&mut b, &critic, 0.9, 0.95, None);
        for ep in &b.episodes {
            let s = &ep.steps[0];
            assert_eq!(s.advantage, s.reward - critic.get(s.state));
        }
    }

    fn masked_fixture() -> (TabularMdp, SupportMask) {
        let tab = tiny();
        let data = SequenceDataset::new(vec![(0, vec![0, 2]), (0, vec![1, 0, 2]), (0, vec![0, 1, 2])]);
        let beta = fit_behavior(&data, tab.mdp(), 1e-4).unwrap();
        let mask = beta.support_mask(tab.index());
        (tab, mask)
    }

    #[test]
    fn bspo_targets_floor_exactly_after_unsupported() {
        let (tab, mask) = masked_fixture();
        let pi = StochasticPolicy::from_logits(3, vec![0.0; tab.n_states() * 3]).unwrap();
        let mut b = collect_batch(&tab, &pi, &mask, 200, 3, 0);
        let scores = vec![0.5; 200];
        shape_rewards_with(&mut b, &scores, &pi, 0.0);
        let critic = critic_random(&tab, 4);
        let mut td = b.clone();
        critic_targets_td(&mut td, &critic, 0.9);
        critic_targets_bspo(&mut b, &critic, 0.9, -15.0);
        let mut saw_floor = false;
        for (ep, td_ep) in b.episodes.iter().zip(&td.episodes) {
            let mut left_support = false;
            for (t, (s, s_td)) in ep.steps.iter().zip(&td_ep.steps).enumerate() {
                let entered = t == 0 || ep.steps[t - 1].action_supported;
                assert_eq!(s.entered_supported, entered);
                if !entered {
                    assert_eq!(s.target, -15.0);
                    saw_floor = true;
                } else if s.action_supported || t + 1 < ep.steps.len() {
                    assert_eq!(s.target, s_td.target);
                }
                left_support |= !entered;
            }
            if ep.steps.iter().all(|s| s.action_supported) {
                assert!(!left_support);
            }
        }
        assert!(saw_floor);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let tab = tiny();
        let pi = random_logits(&tab, 11);
        let mut b = batch(&tab, &pi, 12, 12);
        shape_rewards_with(&mut b, &[0.3; 12], &pi, 0.0);
        let mut rng = stream(13, &[]);
        for k in 0..20 {
            let critic = critic_random(&tab, 100 + k);
            critic_targets_td(&mut b, &critic_random(&tab, 200 + k), 0.9);
            let (_, grad) = critic_loss(&critic, &b);
            let dir: Vec<f64> = (0..tab.n_states()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic: f64 = grad.iter().map(|(&s, g)| g * dir[s]).sum();
            let h = 1e-6;
            let shifted = |sign: f64| {
                let mut c = critic.clone();
                for s in 0..tab.n_states() {
                    c.set(s, critic.get(s) + sign * h * dir[s]);
                }
                critic_loss(&c, &b).0
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
            assert!(rel <= 1e-4, "analytic {analytic} fd {fd}");
        }
    }

    #[test]
    fn critic_floor_converges() {
        let (tab, mask) = masked_fixture();
        let pi = StochasticPolicy::from_logits(3, vec![0.0; tab.n_states() * 3]).unwrap();
        let mut b = collect_batch(&tab, &pi, &mask, 100, 5, 0);
        shape_rewards_with(&mut b, &vec![1.0; 100], &pi, 0.0);
        let mut critic = CriticTable::zeros(&tab);
        critic_targets_bspo(&mut b, &critic, 0.9, -15.0);
        train_critic(&mut critic, &b, 0.05, 200).unwrap();
        for s in b.steps().filter(|s| !s.entered_supported) {
            assert!((critic.get(s.state) + 15.0).abs() < 1e-3);
        }
    }

    #[test]
    fn critic_matches_exact_evaluation() {
        // A batch holding every response in proportion to its probability
        // makes the TD fixed point equal the exact value.
        let tab = tiny();
        let mut table = vec![0.0; tab.n_states() * 3];
        for s in 0..tab.n_states() {
            table[s * 3..s * 3 + 3].copy_from_slice(&[0.5, 0.25, 0.25]);
        }
        let pi = StochasticPolicy::from_table(3, table).unwrap();
        let logits = StochasticPolicy::from_logits(3, vec![0.0; tab.n_states() * 3]).unwrap();
        let reward = |s: &SeqState| (s.tokens.len() as f64 * 0.3) - if s.tokens.contains(&1) { 0.5 } else { 0.0 };
        let mut episodes = Vec::new();
        let mut stack = vec![(tab.index().root(0), Vec::<BatchStep>::new(), 1.0f64)];
        while let Some((s, steps, p)) = stack.pop() {
            if tab.index().is_terminal(s) {
                let copies = (p * 64.0).round() as usize;
                assert!((copies as f64 - p * 64.0).abs() < 1e-9);
                for _ in 0..copies {
                    episodes.push(Episode {
                        prompt: 0,
                        steps: steps.clone(),
                        final_state: s,
                    });
                }
                continue;
            }
            for a in 0..3 {
                let next = tab.next(s, a);
                let mut steps = steps.clone();
                steps.push(BatchStep {
                    state: s,
                    action: a,
                    next,
                    old_log_prob: logits.log_prob(s, a),
                    reward: 0.0,
                    advantage: 0.0,
                    target: 0.0,
                    entered_supported: true,
                    action_supported: true,
                });
                stack.push((next, steps, p * pi.prob(s, a)));
            }
        }
        let mut b = TrajectoryBatch { episodes };
        let scores: Vec<f64> = b
            .episodes
            .iter()
            .map(|e| reward(tab.index().state(e.final_state)))
            .collect();
        shape_rewards_with(&mut b, &scores, &logits, 0.0);
        let mut critic = CriticTable::zeros(&tab);
        for _ in 0..20_000 {
            critic_targets_td(&mut b, &critic, 0.9);
            train_critic(&mut critic, &b, 2e-4, 1).unwrap();
        }
        let rewarded = TabularMdp::build(
            tab.mdp()
                .with_reward(Arc::new(move |p: usize, t: &[Token]| reward(&SeqState::new(p, t.to_vec()))), -5.0, 5.0)
                .unwrap(),
            DEFAULT_STATE_CAP,
        )
        .unwrap();
        let bounds = ValueBounds::for_mdp(rewarded.mdp(), -15.0).unwrap();
        let full = SupportMask::full(tab.n_states(), 3);
        let exact = solve_v_fixed_point(&rewarded, &full, &pi, &bounds, SolveOptions::default(), None)
            .unwrap()
            .table;
        for s in tab.index().nonterminal() {
            assert!((critic.get(s) - exact.get(s)).abs() < 1e-3, "state {s}: {} vs {}", critic.get(s), exact.get(s));
        }
    }

    #[test]
    fn clip_algebra_grid() {
        for i in 0..=40 {
            let rho = 0.5 + i as f64 * 0.025;
            for adv in [-2.0, -0.5, 0.0, 0.5, 2.0] {
                let (obj, active) = clipped_objective(rho, adv, 0.2);
                let clipped = rho.clamp(0.8, 1.2) * adv;
                assert_eq!(obj, (rho * adv).min(clipped));
                assert!(obj <= (rho * adv).max(clipped));
                if active {
                    assert_eq!(obj, rho * adv);
                }
            }
        }
    }

    #[test]
    fn first_step_is_vanilla_gradient() {
        let tab = tiny();
        let pi = random_logits(&tab, 20);
        let mut b = batch(&tab, &pi, 10, 21);
        let mut rng = stream(22, &[]);
        for s in b.steps_mut() {
            s.advantage = rng.random_range(-1.0..1.0);
        }
        let (_, grad) = ppo_surrogate(&b, &pi, 0.2);
        let n = b.n_tokens() as f64;
        let mut want: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for s in b.steps() {
            let g = want.entry(s.state).or_insert_with(|| vec![0.0; 3]);
            for (a, ga) in g.iter_mut().enumerate() {
                let onehot = if a == s.action { 1.0 } else { 0.0 };
                *ga += s.advantage * (onehot - pi.prob(s.state, a)) / n;
            }
        }
        for (s, g) in &grad {
            for (x, y) in g.iter().zip(&want[s]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ppo_gradient_matches_finite_differences() {
        let tab = tiny();
        let mut rng = stream(30, &[]);
        for k in 0..20 {
            let old = random_logits(&tab, 300 + k);
            let mut b = batch(&tab, &old, 10, 400 + k);
            for s in b.steps_mut() {
                s.advantage = rng.random_range(-1.0..1.0);
            }
            let pi = random_logits(&tab, 500 + k);
            let (_, grad) = ppo_surrogate(&b, &pi, 0.2);
            let n = tab.n_states() * 3;
            let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic: f64 = grad
                .iter()
                .map(|(&s, g)| g.iter().enumerate().map(|(a, x)| x * dir[s * 3 + a]).sum::<f64>())
                .sum();
            let h = 1e-6;
            let shifted = |sign: f64| {
                let logits: Vec<f64> = pi.logits().unwrap().iter().zip(&dir).map(|(l, d)| l + sign * h * d).collect();
                ppo_surrogate(&b, &StochasticPolicy::from_logits(3, logits).unwrap(), 0.2).0
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
            assert!(rel <= 1e-4, "point {k}: analytic {analytic} fd {fd}");
        }
    }

    #[test]
    fn zero_advantage_leaves_policy() {
        let tab = tiny();
        let mut pi = random_logits(&tab, 40);
        let before = pi.clone();
        let b = batch(&tab, &pi, 10, 41);
        ppo_update(&b, &mut pi, 0.2, 5.0, 3).unwrap();
        assert_eq!(pi, before);
    }

    #[test]
    fn ensemble_combinations() {
        let same: Vec<Arc<dyn SequenceReward>> = (0..3)
            .map(|_| Arc::new(|_: usize, t: &[Token]| t.len() as f64) as Arc<dyn SequenceReward>)
            .collect();
        let uwo = EnsembleReward { members: same, mode: Combine::Uwo { lambda: 2.0 } };
        assert_eq!(uwo.score(0, &[1, 2]), 2.0);
        let scores = [1.0, -0.5, 3.0, 2.0];
        assert_eq!(combine_scores(&scores, Combine::Wco), -0.5);
        assert!(scores.iter().all(|&s| combine_scores(&scores, Combine::Wco) <= s));
        assert_eq!(combine_scores(&scores, Combine::Uwo { lambda: 0.0 }), 5.5 / 4.0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("ppo"), None);
    }

    #[test]
    fn cppo_threshold_from_prior() {
        let mut log = RunLog::new("standard_ppo", 0);
        for (step, (p, g)) in [(0.0, 0.0), (1.0, 2.0), (2.0, 1.0), (3.0, 0.5)].into_iter().enumerate() {
            log.rows.push(RunRow {
                step,
                proxy_reward_mean: p,
                gold_reward_mean: g,
                kl_to_ref: 0.0,
                unsupported_per_response: 0.0,
                mean_length: 0.0,
            });
        }
        assert!((cppo_threshold(&log, 0.05).unwrap() - (1.0 - 0.15)).abs() < 1e-12);
    }
}

//! Synthetic gold rewards, preference data and the proxy score model.
//!
//! The gold reward is a hidden linear model over exact unigram and bigram
//! counts plus a bounded per-sequence perturbation. The proxy is a linear
//! model over hashed n-gram counts with a tabular next-token head, trained
//! jointly on a Bradley-Terry loss and a next-token likelihood term.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{
    classify_tokens, join_tokens, parse_tokens, BehaviorPolicy, SequenceDataset,
};
use crate::error::{Error, Result};
use crate::policy::StochasticPolicy;
use crate::rng::{derive_seed, mix64, stream, unit_symmetric};
use crate::seq_mdp::{rollout_from, sample_prompt, SeqState, SequenceReward, TabularMdp, Token, TokenMdp};

const BT_FLOOR: f64 = 1.0 / 9_007_199_254_740_992.0; // 2^-53

/// Bradley-Terry preference probability, kept strictly inside (0, 1).
/// `bt_probability(a, b) + bt_probability(b, a) == 1` holds exactly.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    let d = r_w - r_l;
    if d >= 0.0 {
        (1.0 / (1.0 + (-d).exp())).min(1.0 - BT_FLOOR)
    } else {
        1.0 - bt_probability(r_l, r_w)
    }
}

/// `log(sigmoid(d))` without overflow.
fn log_sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        -(-d).exp().ln_1p()
    } else {
        d - d.exp().ln_1p()
    }
}

fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSpec {
    pub seed: u64,
    /// Scale of the random unigram and bigram weights.
    pub weight_scale: f64,
    /// Token whose unigram weight is raised by `tempting_bonus`.
    pub tempting_token: Option<Token>,
    pub tempting_bonus: f64,
    /// Subtracted for every immediately repeated token.
    pub repeat_penalty: f64,
    /// Content tokens past this many are each charged `length_penalty`.
    #[serde(default)]
    pub length_threshold: Option<usize>,
    #[serde(default)]
    pub length_penalty: f64,
    /// Half-width of the per-sequence perturbation.
    pub perturbation: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for GoldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            weight_scale: 1.0,
            tempting_token: None,
            tempting_bonus: 0.0,
            repeat_penalty: 0.0,
            length_threshold: None,
            length_penalty: 0.0,
            perturbation: 0.1,
            r_min: -10.0,
            r_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldReward {
    n_actions: usize,
    eos: Token,
    unigram: Vec<f64>,
    /// Rows `0..n_actions` are previous tokens, then one start row per prompt.
    bigram: Vec<f64>,
    length_threshold: Option<usize>,
    length_penalty: f64,
    perturbation: f64,
    seed: u64,
    r_min: f64,
    r_max: f64,
}

impl GoldReward {
    pub fn new(mdp: &TokenMdp, spec: &GoldSpec) -> Result<Self> {
        if !(spec.r_min < spec.r_max) || spec.perturbation < 0.0 {
            return Err(Error::config("gold", "need r_min < r_max and perturbation >= 0"));
        }
        let v = mdp.n_actions();
        let eos = mdp.vocab().eos();
        if let Some(t) = spec.tempting_token {
            if t >= v || t == eos {
                return Err(Error::config("gold.tempting_token", format!("{t} is not a content token")));
            }
        }
        let mut rng = stream(spec.seed, &[0x601d]);
        let mut unigram: Vec<f64> = (0..v).map(|_| spec.weight_scale * rng.random_range(-1.0..1.0)).collect();
        let rows = v + mdp.n_prompts();
        let mut bigram: Vec<f64> = (0..rows * v)
            .map(|_| spec.weight_scale * rng.random_range(-1.0..1.0))
            .collect();
        if let Some(t) = spec.tempting_token {
            unigram[t] += spec.tempting_bonus;
        }
        for a in 0..v {
            bigram[a * v + a] -= spec.repeat_penalty;
        }
        unigram[eos] = 0.0;
        Ok(Self {
            n_actions: v,
            eos,
            unigram,
            bigram,
            length_threshold: spec.length_threshold,
            length_penalty: spec.length_penalty,
            perturbation: spec.perturbation,
            seed: spec.seed,
            r_min: spec.r_min,
            r_max: spec.r_max,
        })
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.r_min, self.r_max)
    }

    /// Score before clamping and perturbation.
    pub fn linear_part(&self, prompt: usize, tokens: &[Token]) -> f64 {
        let v = self.n_actions;
        let mut prev = v + prompt;
        let mut total = 0.0;
        for (i, &t) in tokens.iter().enumerate() {
            if t == self.eos {
                break;
            }
            total += self.unigram[t] + self.bigram[prev * v + t];
            if self.length_threshold.is_some_and(|l| i >= l) {
                total -= self.length_penalty;
            }
            prev = t;
        }
        total
    }

    fn perturb(&self, prompt: usize, tokens: &[Token]) -> f64 {
        let h = tokens
            .iter()
            .fold(derive_seed(self.seed, &[0x9e27, prompt as u64]), |acc, &t| {
                mix64(acc ^ (t as u64 + 1))
            });
        self.perturbation * unit_symmetric(h)
    }
}

impl SequenceReward for GoldReward {
    fn score(&self, prompt: usize, tokens: &[Token]) -> f64 {
        (self.linear_part(prompt, tokens) + self.perturb(prompt, tokens)).clamp(self.r_min, self.r_max)
    }
}

/// Hashed unigram and bigram counts. Bigrams include a per-prompt start
/// marker; the end-of-sequence token contributes nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub dim: usize,
    pub n_actions: usize,
    pub eos: Token,
}

impl FeatureMap {
    fn bucket(&self, kind: u64, a: u64, b: u64) -> usize {
        (derive_seed(0xfea7, &[kind, a, b]) % self.dim as u64) as usize
    }

    /// Sparse feature vector as sorted (bucket, count) pairs.
    pub fn features(&self, prompt: usize, tokens: &[Token]) -> Vec<(usize, f64)> {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        let mut prev = (self.n_actions + prompt) as u64;
        for &t in tokens {
            if t == self.eos {
                break;
            }
            *counts.entry(self.bucket(1, t as u64, 0)).or_default() += 1.0;
            *counts.entry(self.bucket(2, prev, t as u64)).or_default() += 1.0;
            prev = t as u64;
        }
        let mut out: Vec<(usize, f64)> = counts.into_iter().collect();
        out.sort_unstable_by_key(|&(i, _)| i);
        out
    }

    pub fn dense(&self, prompt: usize, tokens: &[Token]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, c) in self.features(prompt, tokens) {
            out[i] = c;
        }
        out
    }
}

fn dot(w: &[f64], f: &[(usize, f64)]) -> f64 {
    f.iter().map(|&(i, c)| w[i] * c).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub features: FeatureMap,
    pub weights: Vec<f64>,
    /// States with a behavior-head row, in row order.
    pub head_states: Vec<SeqState>,
    pub behavior_logits: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
    head_index: HashMap<SeqState, usize>,
}

impl ScoreModel {
    pub fn new(
        features: FeatureMap,
        weights: Vec<f64>,
        head_states: Vec<SeqState>,
        behavior_logits: Vec<f64>,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if weights.len() != features.dim {
            return Err(Error::DimensionMismatch {
                expected: features.dim,
                got: weights.len(),
            });
        }
        if behavior_logits.len() != head_states.len() * features.n_actions {
            return Err(Error::DimensionMismatch {
                expected: head_states.len() * features.n_actions,
                got: behavior_logits.len(),
            });
        }
        if weights.iter().chain(&behavior_logits).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("score model parameters".into()));
        }
        let head_index = head_states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(Self {
            features,
            weights,
            head_states,
            behavior_logits,
            alpha,
            seed,
            loss_trace: Vec::new(),
            head_index,
        })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    /// Softmax of the behavior-head logits at `s`, if the head has a row there.
    pub fn head_distribution(&self, s: &SeqState) -> Option<Vec<f64>> {
        let v = self.features.n_actions;
        let r = *self.head_index.get(s)?;
        let row = &self.behavior_logits[r * v..(r + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Some(exps.into_iter().map(|e| e / z).collect())
    }

    /// Header line plus the weights, then one logit row per head state.
    pub fn to_dump(&self) -> String {
        let mut out = format!(
            "score_model dim={} alpha={} seed={} n_actions={} eos={} head_states={}\n",
            self.features.dim,
            self.alpha,
            self.seed,
            self.features.n_actions,
            self.features.eos,
            self.head_states.len()
        );
        let w: Vec<String> = self.weights.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{}", w.join(","));
        let v = self.features.n_actions;
        for (i, s) in self.head_states.iter().enumerate() {
            let row: Vec<String> = self.behavior_logits[i * v..(i + 1) * v]
                .iter()
                .map(|x| x.to_string())
                .collect();
            let _ = writeln!(out, "{}\t{}\t{}", s.prompt, join_tokens(&s.tokens), row.join(","));
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty dump".into(),
        })?;
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for kv in header.split_whitespace().skip(1) {
            if let Some((k, v)) = kv.split_once('=') {
                fields.insert(k, v);
            }
        }
        let get = |k: &str| {
            fields.get(k).copied().ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing header field {k}"),
            })
        };
        let bad = |line: usize, e: &dyn std::fmt::Display| Error::Parse {
            line,
            message: e.to_string(),
        };
        let dim: usize = get("dim")?.parse().map_err(|e| bad(1, &e))?;
        let alpha: f64 = get("alpha")?.parse().map_err(|e| bad(1, &e))?;
        let seed: u64 = get("seed")?.parse().map_err(|e| bad(1, &e))?;
        let n_actions: usize = get("n_actions")?.parse().map_err(|e| bad(1, &e))?;
        let eos: Token = get("eos")?.parse().map_err(|e| bad(1, &e))?;
        let parse_row = |s: &str, line: usize| -> Result<Vec<f64>> {
            s.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| bad(line, &e)))
                .collect()
        };
        let weights = parse_row(lines.next().unwrap_or(""), 2)?;
        let mut head_states = Vec::new();
        let mut logits = Vec::new();
        for (n, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad(n + 3, &"expected prompt<TAB>tokens<TAB>logits"));
            }
            let prompt: usize = parts[0].parse().map_err(|e| bad(n + 3, &e))?;
            let tokens = if parts[1].is_empty() {
                Vec::new()
            } else {
                parse_tokens(parts[1], n + 3)?
            };
            head_states.push(SeqState::new(prompt, tokens));
            logits.extend(parse_row(parts[2], n + 3)?);
        }
        let features = FeatureMap { dim, n_actions, eos };
        Self::new(features, weights, head_states, logits, alpha, seed)
    }
}

impl SequenceReward for ScoreModel {
    fn score(&self, prompt: usize, tokens: &[Token]) -> f64 {
        dot(&self.weights, &self.features.features(prompt, tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt: usize,
    pub y_w: Vec<Token>,
    pub y_l: Vec<Token>,
    /// Gold scores were equal; the lexicographically smaller response won.
    pub tie: bool,
}

#[derive(Debug, Clone)]
pub struct PreferenceData {
    pub pairs: Vec<PreferencePair>,
    pub sequences: SequenceDataset,
    pub skipped: usize,
    pub ties: usize,
}

pub const PAIR_RETRY_CAP: usize = 16;

/// Samples `n_pairs` response pairs and labels each by the gold score.
pub fn generate_preferences(
    tab: &TabularMdp,
    gold: &dyn SequenceReward,
    sampler: &StochasticPolicy,
    n_pairs: usize,
    seed: u64,
) -> Result<PreferenceData> {
    if n_pairs == 0 {
        return Err(Error::EmptyPartition("preference pairs"));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut skipped = 0;
    let mut ties = 0;
    for i in 0..n_pairs as u64 {
        let prompt = sample_prompt(tab.mdp().mu(), stream(seed, &[i, 0]).random());
        let y1 = rollout_from(tab, sampler, prompt, &mut stream(seed, &[i, 1])).tokens();
        let y2 = (0..PAIR_RETRY_CAP as u64)
            .map(|r| rollout_from(tab, sampler, prompt, &mut stream(seed, &[i, 2, r])).tokens())
            .find(|y| *y != y1);
        let Some(y2) = y2 else {
            skipped += 1;
            continue;
        };
        let (g1, g2) = (gold.score(prompt, &y1), gold.score(prompt, &y2));
        let tie = g1 == g2;
        let first_wins = if tie { y1 < y2 } else { g1 > g2 };
        ties += usize::from(tie);
        let (y_w, y_l) = if first_wins { (y1, y2) } else { (y2, y1) };
        pairs.push(PreferencePair { prompt, y_w, y_l, tie });
    }
    let sequences = flatten_pairs(&pairs);
    Ok(PreferenceData {
        pairs,
        sequences,
        skipped,
        ties,
    })
}

/// Chosen and rejected responses as one sequence dataset.
pub fn flatten_pairs(pairs: &[PreferencePair]) -> SequenceDataset {
    SequenceDataset::new(
        pairs
            .iter()
            .flat_map(|p| [(p.prompt, p.y_w.clone()), (p.prompt, p.y_l.clone())])
            .collect(),
    )
}

/// `prompt_id<TAB>w_tokens<TAB>l_tokens` per line.
pub fn pairs_to_text(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let _ = writeln!(out, "{}\t{}\t{}", p.prompt, join_tokens(&p.y_w), join_tokens(&p.y_l));
    }
    out
}

pub fn pairs_from_text(text: &str) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: n + 1,
                message: "expected prompt_id<TAB>w_tokens<TAB>l_tokens".into(),
            });
        }
        let prompt = parts[0].trim().parse().map_err(|e: std::num::ParseIntError| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let y_w = parse_tokens(parts[1], n + 1)?;
        let y_l = parse_tokens(parts[2], n + 1)?;
        if y_w == y_l {
            return Err(Error::Parse {
                line: n + 1,
                message: "identical responses".into(),
            });
        }
        pairs.push(PreferencePair {
            prompt,
            y_w,
            y_l,
            tie: false,
        });
    }
    Ok(pairs)
}

pub fn save_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    std::fs::write(path, pairs_to_text(pairs))?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    pairs_from_text(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreLmSpec {
    pub alpha: f64,
    pub feature_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Score weights start uniform in [-init_scale, init_scale].
    pub init_scale: f64,
}

impl Default for ScoreLmSpec {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            feature_dim: 64,
            lr: 0.1,
            epochs: 500,
            init_scale: 0.1,
        }
    }
}

/// The joint preference and next-token loss with its analytic gradient.
#[derive(Debug, Clone)]
pub struct ScoreLmObjective {
    pub features: FeatureMap,
    pub alpha: f64,
    /// Per pair, sparse f(y_w) - f(y_l).
    pair_diffs: Vec<Vec<(usize, f64)>>,
    head_states: Vec<SeqState>,
    /// (head row, observed token) per dataset token.
    occurrences: Vec<(usize, Token)>,
}

impl ScoreLmObjective {
    pub fn new(pairs: &[PreferencePair], seq_data: &SequenceDataset, mdp: &TokenMdp, features: FeatureMap, alpha: f64) -> Self {
        let pair_diffs = pairs
            .iter()
            .map(|p| {
                let mut d: HashMap<usize, f64> = HashMap::new();
                for (i, c) in features.features(p.prompt, &p.y_w) {
                    *d.entry(i).or_default() += c;
                }
                for (i, c) in features.features(p.prompt, &p.y_l) {
                    *d.entry(i).or_default() -= c;
                }
                let mut d: Vec<(usize, f64)> = d.into_iter().filter(|&(_, c)| c != 0.0).collect();
                d.sort_unstable_by_key(|&(i, _)| i);
                d
            })
            .collect();
        let mut head_states = Vec::new();
        let mut index: HashMap<SeqState, usize> = HashMap::new();
        let mut occurrences = Vec::new();
        for (prompt, tokens) in &seq_data.records {
            let mut s = SeqState::root(*prompt);
            for &t in tokens {
                if mdp.is_terminal(&s) {
                    break;
                }
                let row = *index.entry(s.clone()).or_insert_with(|| {
                    head_states.push(s.clone());
                    head_states.len() - 1
                });
                occurrences.push((row, t));
                s = s.child(t);
            }
        }
        Self {
            features,
            alpha,
            pair_diffs,
            head_states,
            occurrences,
        }
    }

    pub fn head_states(&self) -> &[SeqState] {
        &self.head_states
    }

    pub fn n_weights(&self) -> usize {
        self.features.dim
    }

    pub fn n_logits(&self) -> usize {
        self.head_states.len() * self.features.n_actions
    }

    pub fn loss(&self, weights: &[f64], logits: &[f64]) -> f64 {
        self.loss_and_grad(weights, logits, false).0
    }

    /// Returns (loss, d/d weights, d/d logits).
    pub fn loss_and_grad(&self, weights: &[f64], logits: &[f64], want_grad: bool) -> (f64, Vec<f64>, Vec<f64>) {
        let v = self.features.n_actions;
        let mut gw = vec![0.0; if want_grad { weights.len() } else { 0 }];
        let mut gl = vec![0.0; if want_grad { logits.len() } else { 0 }];
        let mut pref = 0.0;
        if !self.pair_diffs.is_empty() {
            let n = self.pair_diffs.len() as f64;
            for d in &self.pair_diffs {
                let margin = dot(weights, d);
                pref -= log_sigmoid(margin);
                if want_grad {
                    let g = -(1.0 - sigmoid(margin)) / n;
                    for &(i, c) in d {
                        gw[i] += g * c;
                    }
                }
            }
            pref /= n;
        }
        let mut sup = 0.0;
        if self.alpha != 0.0 && !self.occurrences.is_empty() {
            let m = self.occurrences.len() as f64;
            let mut probs = vec![0.0; v];
            for &(row, t) in &self.occurrences {
                let l = &logits[row * v..(row + 1) * v];
                let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = l.iter().map(|x| (x - max).exp()).sum();
                sup -= l[t] - max - z.ln();
                if want_grad {
                    for (a, p) in probs.iter_mut().enumerate() {
                        *p = (l[a] - max).exp() / z;
                    }
                    for a in 0..v {
                        let onehot = if a == t { 1.0 } else { 0.0 };
                        gl[row * v + a] += self.alpha * (probs[a] - onehot) / m;
                    }
                }
            }
            sup /= m;
        }
        (pref + self.alpha * sup, gw, gl)
    }
}

/// Full-batch gradient descent on the joint loss. Score weights start from
/// a seeded uniform draw; the behavior head starts at zero logits.
pub fn train_scorelm(
    pairs: &[PreferencePair],
    seq_data: &SequenceDataset,
    mdp: &TokenMdp,
    spec: &ScoreLmSpec,
    seed: u64,
) -> Result<ScoreModel> {
    if spec.alpha < 0.0 || !(spec.lr > 0.0) || spec.feature_dim == 0 {
        return Err(Error::config("scorelm", "need alpha >= 0, lr > 0, feature_dim > 0"));
    }
    let features = FeatureMap {
        dim: spec.feature_dim,
        n_actions: mdp.n_actions(),
        eos: mdp.vocab().eos(),
    };
    let objective = ScoreLmObjective::new(pairs, seq_data, mdp, features, spec.alpha);
    let mut rng = stream(seed, &[0x5c0e]);
    let mut weights: Vec<f64> = (0..spec.feature_dim)
        .map(|_| spec.init_scale * rng.random_range(-1.0..=1.0))
        .collect();
    let mut logits = vec![0.0; objective.n_logits()];
    let mut trace = Vec::with_capacity(spec.epochs + 1);
    for _ in 0..spec.epochs {
        let (loss, gw, gl) = objective.loss_and_grad(&weights, &logits, true);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("scorelm loss after {} epochs", trace.len())));
        }
        trace.push(loss);
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= spec.lr * g;
        }
        for (l, g) in logits.iter_mut().zip(&gl) {
            *l -= spec.lr * g;
        }
    }
    let loss = objective.loss(&weights, &logits);
    if !loss.is_finite() {
        return Err(Error::NonFinite("scorelm final loss".into()));
    }
    trace.push(loss);
    let mut model = ScoreModel::new(
        features,
        weights,
        objective.head_states().to_vec(),
        logits,
        spec.alpha,
        seed,
    )?;
    model.loss_trace = trace;
    Ok(model)
}

/// A novel response paired with a reference response to the same prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub prompt: usize,
    pub novel: Vec<Token>,
    pub reference: Vec<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracySplit {
    pub supported: Option<f64>,
    pub unsupported: Option<f64>,
    pub n_supported: usize,
    pub n_unsupported: usize,
}

impl AccuracySplit {
    pub fn both(&self) -> Result<(f64, f64)> {
        match (self.supported, self.unsupported) {
            (Some(s), Some(u)) => Ok((s, u)),
            (None, _) => Err(Error::EmptyPartition("supported pairs")),
            (_, None) => Err(Error::EmptyPartition("unsupported pairs")),
        }
    }
}

/// Preference accuracy of `model` against `gold`, split by whether the novel
/// response stays inside the behavior support. Pairs with equal gold scores
/// carry no label and are skipped; a model tie earns half credit.
pub fn accuracy_split(
    model: &dyn SequenceReward,
    gold: &dyn SequenceReward,
    beta: &BehaviorPolicy,
    eval_pairs: &[EvalPair],
) -> AccuracySplit {
    let mut credit = [0.0f64; 2];
    let mut count = [0usize; 2];
    for p in eval_pairs {
        let g = gold.score(p.prompt, &p.novel) - gold.score(p.prompt, &p.reference);
        if g == 0.0 {
            continue;
        }
        let m = model.score(p.prompt, &p.novel) - model.score(p.prompt, &p.reference);
        let bucket = usize::from(classify_tokens(beta, p.prompt, &p.novel).unsupported_count > 0);
        count[bucket] += 1;
        credit[bucket] += if m == 0.0 {
            0.5
        } else if (m > 0.0) == (g > 0.0) {
            1.0
        } else {
            0.0
        };
    }
    let acc = |b: usize| (count[b] > 0).then(|| credit[b] / count[b] as f64);
    AccuracySplit {
        supported: acc(0),
        unsupported: acc(1),
        n_supported: count[0],
        n_unsupported: count[1],
    }
}

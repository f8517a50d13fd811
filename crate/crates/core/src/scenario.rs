//! Scenario files: one TOML document describing the MDP, the synthetic
//! reward and data pipeline, proxy training and every RL variant.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{fit_behavior_with, BehaviorPolicy, Fallback, DEFAULT_EPSILON_BETA};
use crate::error::{Error, Result};
use crate::metrics_io::{checkpoints, curve, ls_slope, pooled_std, RunLog, DEFAULT_ELO_K, DEFAULT_ELO_ROUNDS};
use crate::policy::StochasticPolicy;
use crate::reward_lab::{
    generate_preferences, train_scorelm, EvalPair, GoldReward, GoldSpec, PreferenceData, ScoreLmSpec, ScoreModel,
};
use crate::rl_engine::{cppo_threshold, run_variant, run_variant_with_policy, RlConfig, RunContext, Variant};
use crate::rng::{derive_seed, stream, unit_symmetric};
use crate::seq_mdp::{rollout_from, SequenceReward, TabularMdp, TokenMdp, Vocab, DEFAULT_STATE_CAP};

pub const SCHEMA_VERSION: u32 = 1;

/// The desk-scale scenario used by the acceptance suite.
pub const STANDARD_TOML: &str = include_str!("../scenarios/standard.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub vocab_size: usize,
    pub eos: usize,
    pub max_len: usize,
    pub n_prompts: usize,
    /// Discount of the exact solvers.
    pub gamma: f64,
    #[serde(default)]
    pub state_cap: Option<u64>,
}

/// Softmax sampler used to generate the preference data; it is also the
/// initial and reference policy of every RL run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub seed: u64,
    /// Scale of the per-prompt token preferences.
    pub pref_scale: f64,
    /// Logit subtracted from the token equal to the previous one.
    pub repeat_penalty: f64,
    /// End-of-sequence logit is `eos_base + eos_slope * depth`.
    pub eos_base: f64,
    pub eos_slope: f64,
    /// Half-width of the per-state logit noise.
    pub noise: f64,
    #[serde(default)]
    pub boosts: Vec<TokenBoost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenBoost {
    pub token: usize,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n_pairs: usize,
    pub seed: u64,
    #[serde(default = "default_epsilon_beta")]
    pub epsilon_beta: f64,
    #[serde(default)]
    pub fallback: Fallback,
    /// Held-out pairs for the accuracy split.
    pub eval_pairs: usize,
    pub eval_seed: u64,
    /// Temperature of the sampler that draws the novel eval responses.
    pub eval_temperature: f64,
}

fn default_epsilon_beta() -> f64 {
    DEFAULT_EPSILON_BETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySpec {
    pub seed: u64,
    /// Member 0 is the proxy and sees every pair.
    pub ensemble_size: usize,
    /// Members after the first train on a bootstrap resample of the pairs.
    #[serde(default = "default_true")]
    pub bootstrap: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default = "default_elo_k")]
    pub elo_k: f64,
    #[serde(default = "default_elo_rounds")]
    pub elo_rounds: usize,
    #[serde(default = "default_init_rating")]
    pub init_rating: f64,
}

fn default_elo_k() -> f64 {
    DEFAULT_ELO_K
}

fn default_elo_rounds() -> usize {
    DEFAULT_ELO_ROUNDS
}

fn default_init_rating() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema_version: u32,
    name: String,
    seeds: Vec<u64>,
    mdp: MdpSpec,
    gold: GoldSpec,
    sampler: SamplerSpec,
    data: DataSpec,
    proxy: ProxySpec,
    scorelm: ScoreLmSpec,
    rl: toml::Table,
    eval: EvalSpec,
    #[serde(default)]
    cppo_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    /// RL seeds; data and proxies are shared across them.
    pub seeds: Vec<u64>,
    pub mdp: MdpSpec,
    pub gold: GoldSpec,
    pub sampler: SamplerSpec,
    pub data: DataSpec,
    pub proxy: ProxySpec,
    pub scorelm: ScoreLmSpec,
    pub rl: BTreeMap<Variant, RlConfig>,
    pub eval: EvalSpec,
    /// Safety margin below the prior proxy peak, as a fraction of its range.
    pub cppo_margin: f64,
}

fn merge(base: &toml::Table, over: &toml::Table) -> toml::Table {
    let mut out = base.clone();
    for (k, v) in over {
        out.insert(k.clone(), v.clone());
    }
    out
}

impl Scenario {
    pub fn standard() -> Self {
        Self::from_toml_str(STANDARD_TOML).expect("bundled scenario parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| Error::config("scenario", e.to_string()))?;
        if raw.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", raw.schema_version),
            ));
        }
        let mut base = raw.rl.clone();
        let overrides = match base.remove("variants") {
            None => toml::Table::new(),
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::config("rl.variants", "must be a table")),
        };
        for key in overrides.keys() {
            if Variant::parse(key).is_none() {
                return Err(Error::config(format!("rl.variants.{key}"), "unknown variant"));
            }
        }
        let mut rl = BTreeMap::new();
        for v in Variant::ALL {
            let table = match overrides.get(v.name()) {
                Some(toml::Value::Table(o)) => merge(&base, o),
                Some(_) => return Err(Error::config(format!("rl.variants.{v}"), "must be a table")),
                None => base.clone(),
            };
            let path = if overrides.contains_key(v.name()) {
                format!("rl.variants.{v}")
            } else {
                "rl".to_string()
            };
            let cfg: RlConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::config(&path, e.to_string()))?;
            cfg.validate().map_err(|e| Error::config(&path, e.to_string()))?;
            rl.insert(v, cfg);
        }
        let sc = Self {
            name: raw.name,
            seeds: raw.seeds,
            mdp: raw.mdp,
            gold: raw.gold,
            sampler: raw.sampler,
            data: raw.data,
            proxy: raw.proxy,
            scorelm: raw.scorelm,
            rl,
            eval: raw.eval,
            cppo_margin: raw.cppo_margin.unwrap_or(0.05),
        };
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: &str| Err(Error::config(path, msg));
        if self.seeds.is_empty() {
            return fail("seeds", "at least one seed is required");
        }
        if self.mdp.n_prompts == 0 {
            return fail("mdp.n_prompts", "must be > 0");
        }
        if self.data.n_pairs == 0 {
            return fail("data.n_pairs", "must be > 0");
        }
        if !(self.data.eval_temperature > 0.0) {
            return fail("data.eval_temperature", "must be > 0");
        }
        if self.proxy.ensemble_size == 0 {
            return fail("proxy.ensemble_size", "must be > 0");
        }
        if self.eval.n_samples == 0 {
            return fail("eval.n_samples", "must be > 0");
        }
        for b in &self.sampler.boosts {
            if b.token >= self.mdp.vocab_size {
                return fail("sampler.boosts", "token outside the vocabulary");
            }
        }
        Ok(())
    }

    pub fn rl_config(&self, variant: Variant, seed: u64) -> RlConfig {
        RlConfig {
            seed,
            ..self.rl[&variant].clone()
        }
    }
}

/// Softmax logits of the data sampler at every enumerated state.
pub fn sampler_logits(tab: &TabularMdp, spec: &SamplerSpec) -> Vec<f64> {
    let v = tab.n_actions();
    let eos = tab.mdp().vocab().eos();
    let index = tab.index();
    let n_prompts = tab.mdp().n_prompts();
    let mut rng_prefs = stream(spec.seed, &[0x5a3f]);
    let prefs: Vec<f64> = (0..n_prompts * v)
        .map(|_| spec.pref_scale * rng_prefs.random_range(-1.0..1.0))
        .collect();
    let mut logits = vec![0.0; tab.n_states() * v];
    for s in 0..tab.n_states() {
        if index.is_terminal(s) {
            continue;
        }
        let st = index.state(s);
        let last = st.last_token();
        let state_hash = st
            .tokens
            .iter()
            .fold(derive_seed(spec.seed, &[0x701e, st.prompt as u64]), |h, &t| {
                derive_seed(h, &[t as u64])
            });
        for a in 0..v {
            let mut l = if a == eos {
                spec.eos_base + spec.eos_slope * st.tokens.len() as f64
            } else {
                prefs[st.prompt * v + a]
            };
            if Some(a) == last {
                l -= spec.repeat_penalty;
            }
            for b in &spec.boosts {
                if b.token == a {
                    l += b.logit;
                }
            }
            l += spec.noise * unit_symmetric(derive_seed(state_hash, &[a as u64]));
            logits[s * v + a] = l;
        }
    }
    logits
}

/// Every artifact of a scenario up to (not including) RL.
pub struct Lab {
    pub scenario: Scenario,
    pub tab: Arc<TabularMdp>,
    pub gold: Arc<GoldReward>,
    pub pi0: StochasticPolicy,
    pub prefs: PreferenceData,
    pub beta: Arc<BehaviorPolicy>,
    pub proxies: Vec<Arc<ScoreModel>>,
    pub eval_pairs: Vec<EvalPair>,
}

/// The enumerated MDP scored by the gold reward, without data or proxies.
pub fn build_world(scenario: &Scenario) -> Result<(Arc<TabularMdp>, Arc<GoldReward>)> {
    let m = &scenario.mdp;
    let vocab = Vocab::new(m.vocab_size, m.eos)?;
    let placeholder = TokenMdp::new(
        vocab,
        TokenMdp::uniform_prompts(m.n_prompts),
        m.max_len,
        m.gamma,
        Arc::new(|_: usize, _: &[usize]| 0.0),
        scenario.gold.r_min,
        scenario.gold.r_max,
    )?;
    let gold = Arc::new(GoldReward::new(&placeholder, &scenario.gold)?);
    let mdp = placeholder.with_reward(gold.clone(), scenario.gold.r_min, scenario.gold.r_max)?;
    let cap = m.state_cap.map(u128::from).unwrap_or(DEFAULT_STATE_CAP);
    let tab = Arc::new(TabularMdp::build(mdp, cap)?);
    Ok((tab, gold))
}

impl Lab {
    pub fn build(scenario: &Scenario) -> Result<Self> {
        let (tab, gold) = build_world(scenario)?;
        let pi0 = StochasticPolicy::from_logits(tab.n_actions(), sampler_logits(&tab, &scenario.sampler))?;
        let prefs = generate_preferences(&tab, gold.as_ref(), &pi0, scenario.data.n_pairs, scenario.data.seed)?;
        let beta = Arc::new(fit_behavior_with(
            &prefs.sequences,
            tab.mdp(),
            scenario.data.epsilon_beta,
            scenario.data.fallback,
        )?);
        let proxies = (0..scenario.proxy.ensemble_size as u64)
            .map(|i| {
                let pairs = if i > 0 && scenario.proxy.bootstrap {
                    let mut rng = stream(scenario.proxy.seed, &[0xb007, i]);
                    let n = prefs.pairs.len();
                    (0..n).map(|_| prefs.pairs[rng.random_range(0..n)].clone()).collect()
                } else {
                    prefs.pairs.clone()
                };
                train_scorelm(
                    &pairs,
                    &prefs.sequences,
                    tab.mdp(),
                    &scenario.scorelm,
                    scenario.proxy.seed + i,
                )
                .map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        let eval_pairs = eval_pairs(&tab, &pi0, &scenario.data)?;
        Ok(Self {
            scenario: scenario.clone(),
            tab,
            gold,
            pi0,
            prefs,
            beta,
            proxies,
            eval_pairs,
        })
    }

    pub fn context(&self) -> Result<RunContext> {
        let proxies: Vec<&dyn SequenceReward> = self.proxies.iter().map(|p| p.as_ref() as &dyn SequenceReward).collect();
        RunContext::new(
            self.tab.clone(),
            self.beta.clone(),
            self.pi0.clone(),
            self.gold.as_ref(),
            &proxies,
        )
    }

    /// Runs one variant. A constrained run without a configured threshold
    /// first runs standard PPO on the same seed and derives one from it.
    pub fn run(&self, ctx: &RunContext, variant: Variant, seed: u64) -> Result<RunLog> {
        self.run_with_policy(ctx, variant, seed).map(|(log, _)| log)
    }

    /// Like `run`, also returning the final policy.
    pub fn run_with_policy(&self, ctx: &RunContext, variant: Variant, seed: u64) -> Result<(RunLog, StochasticPolicy)> {
        let mut cfg = self.scenario.rl_config(variant, seed);
        if variant == Variant::Cppo && cfg.cppo_threshold.is_none() {
            let prior = run_variant(&self.scenario.rl_config(Variant::StandardPpo, seed), Variant::StandardPpo, ctx)?;
            cfg.cppo_threshold = Some(cppo_threshold(&prior, self.scenario.cppo_margin)?);
        }
        run_variant_with_policy(&cfg, variant, ctx)
    }

    /// One run per scenario seed.
    pub fn run_seeds(&self, ctx: &RunContext, variant: Variant) -> Result<Vec<RunLog>> {
        self.scenario.seeds.iter().map(|&s| self.run(ctx, variant, s)).collect()
    }
}

/// Novel responses from a tempered copy of the sampler, each paired with a
/// fresh sampler response to the same prompt.
pub fn eval_pairs(tab: &TabularMdp, pi0: &StochasticPolicy, data: &DataSpec) -> Result<Vec<EvalPair>> {
    let logits: Vec<f64> = pi0
        .logits()
        .expect("sampler is softmax")
        .iter()
        .map(|l| l / data.eval_temperature)
        .collect();
    let tempered = StochasticPolicy::from_logits(tab.n_actions(), logits)?;
    let n_prompts = tab.mdp().n_prompts();
    Ok((0..data.eval_pairs as u64)
        .map(|i| {
            let prompt = (i as usize) % n_prompts;
            let novel = rollout_from(tab, &tempered, prompt, &mut stream(data.eval_seed, &[i, 0])).tokens();
            let reference = rollout_from(tab, pi0, prompt, &mut stream(data.eval_seed, &[i, 1])).tokens();
            EvalPair {
                prompt,
                novel,
                reference,
            }
        })
        .collect())
}

pub const DEFAULT_CHECKPOINTS: usize = 10;

/// Standard PPO against BSPO on matched seeds, read at evenly spaced
/// checkpoints of the seed-averaged curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OveroptReport {
    pub steps: Vec<usize>,
    pub ppo_gold: Vec<f64>,
    pub ppo_proxy: Vec<f64>,
    pub bspo_gold: Vec<f64>,
    pub bspo_pooled_std: f64,
    pub ppo_peak: usize,
    /// (peak - final) / (peak - initial) of the PPO gold curve.
    pub ppo_decline_frac: f64,
    /// PPO proxy at the final checkpoint minus at the gold peak.
    pub ppo_proxy_rise: f64,
    /// Smallest `final - (earlier - pooled_std)` over earlier BSPO checkpoints.
    pub bspo_final_margin: f64,
    pub bspo_wins: usize,
    pub n_seeds: usize,
    pub ppo_unsupported: Vec<f64>,
    pub bspo_unsupported: Vec<f64>,
    pub ppo_unsupported_slope: f64,
}

fn at(xs: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| xs[i]).collect()
}

impl OveroptReport {
    pub fn new(ppo: &[RunLog], bspo: &[RunLog], n_checkpoints: usize) -> Result<Self> {
        let (pg, _) = curve(ppo, "gold_reward_mean")?;
        let (pp, _) = curve(ppo, "proxy_reward_mean")?;
        let (pu, _) = curve(ppo, "unsupported_per_response")?;
        let (bg, bg_std) = curve(bspo, "gold_reward_mean")?;
        let (bu, _) = curve(bspo, "unsupported_per_response")?;
        if pg.len() != bg.len() {
            return Err(Error::GridMismatch(format!("{} PPO rows vs {} BSPO rows", pg.len(), bg.len())));
        }
        let idx = checkpoints(pg.len(), n_checkpoints);
        let steps = idx.iter().map(|&i| ppo[0].rows[i].step).collect();
        let (ppo_gold, ppo_proxy, bspo_gold) = (at(&pg, &idx), at(&pp, &idx), at(&bg, &idx));
        let bspo_pooled_std = pooled_std(&at(&bg_std, &idx));
        let last = idx.len() - 1;
        let ppo_peak = (0..=last).fold(0, |b, i| if ppo_gold[i] > ppo_gold[b] { i } else { b });
        let gain = ppo_gold[ppo_peak] - ppo_gold[0];
        let ppo_decline_frac = if gain > 0.0 {
            (ppo_gold[ppo_peak] - ppo_gold[last]) / gain
        } else {
            0.0
        };
        let bspo_final_margin = (0..last)
            .map(|i| bspo_gold[last] - (bspo_gold[i] - bspo_pooled_std))
            .fold(f64::INFINITY, f64::min);
        let mut bspo_wins = 0;
        for b in bspo {
            let p = ppo
                .iter()
                .find(|p| p.seed == b.seed)
                .ok_or_else(|| Error::GridMismatch(format!("no PPO run for seed {}", b.seed)))?;
            let (fb, fp) = (b.rows.last(), p.rows.last());
            if let (Some(fb), Some(fp)) = (fb, fp) {
                if fb.gold_reward_mean > fp.gold_reward_mean {
                    bspo_wins += 1;
                }
            }
        }
        let ppo_unsupported = at(&pu, &idx);
        Ok(Self {
            steps,
            ppo_proxy_rise: ppo_proxy[last] - ppo_proxy[ppo_peak],
            ppo_gold,
            ppo_proxy,
            bspo_gold,
            bspo_pooled_std,
            ppo_peak,
            ppo_decline_frac,
            bspo_final_margin,
            bspo_wins,
            n_seeds: bspo.len(),
            ppo_unsupported_slope: ls_slope(&ppo_unsupported),
            ppo_unsupported,
            bspo_unsupported: at(&bu, &idx),
        })
    }

    /// PPO peaks then declines by at least a tenth of its gain while the
    /// proxy still rises.
    pub fn ppo_overoptimizes(&self) -> bool {
        let peak = self.ppo_peak;
        peak > 0 && peak + 1 < self.ppo_gold.len() && self.ppo_decline_frac >= 0.1 && self.ppo_proxy_rise > 0.0
    }

    pub fn bspo_holds(&self) -> bool {
        self.bspo_final_margin >= 0.0
    }

    /// BSPO beats PPO at the final step on at least three quarters of seeds.
    pub fn bspo_wins_enough(&self) -> bool {
        self.n_seeds > 0 && 4 * self.bspo_wins >= 3 * self.n_seeds
    }

    pub fn unsupported_ratio(&self) -> f64 {
        let (b, p) = (self.bspo_unsupported.last(), self.ppo_unsupported.last());
        match (b, p) {
            (Some(b), Some(p)) if *p > 0.0 => b / p,
            _ => f64::INFINITY,
        }
    }

    pub fn suppresses_unsupported(&self) -> bool {
        self.unsupported_ratio() < 0.25 && self.ppo_unsupported_slope > 0.0
    }
}

/// Final gold rewards of BSPO across a sweep of critic floors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub v_min: Vec<f64>,
    pub final_gold: Vec<f64>,
    pub pooled_std: f64,
    pub spread: f64,
}

impl AblationReport {
    pub fn new(runs: &[(f64, Vec<RunLog>)]) -> Result<Self> {
        let mut v_min = Vec::new();
        let mut final_gold = Vec::new();
        let mut stds = Vec::new();
        for (v, logs) in runs {
            let (m, s) = curve(logs, "gold_reward_mean")?;
            let last = m.len().checked_sub(1).ok_or(Error::EmptyPartition("ablation rows"))?;
            v_min.push(*v);
            final_gold.push(m[last]);
            stds.push(s[last]);
        }
        if final_gold.is_empty() {
            return Err(Error::EmptyPartition("ablation runs"));
        }
        let hi = final_gold.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = final_gold.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self {
            v_min,
            final_gold,
            pooled_std: pooled_std(&stds),
            spread: hi - lo,
        })
    }

    pub fn within_two_std(&self) -> bool {
        self.spread <= 2.0 * self.pooled_std
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_scenario_parses() {
        let sc = Scenario::standard();
        assert_eq!(sc.mdp.vocab_size, 6);
        assert_eq!(sc.mdp.max_len, 6);
        assert_eq!(sc.mdp.n_prompts, 3);
        assert_eq!(sc.data.n_pairs, 400);
        assert_eq!(sc.scorelm.feature_dim, 64);
        assert_eq!(sc.seeds.len(), 4);
        assert_eq!(sc.rl.len(), Variant::ALL.len());
        assert_eq!(sc.rl[&Variant::Bspo].clip_eps, 0.2);
        assert_eq!(sc.rl[&Variant::Bspo].v_min, -15.0);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = STANDARD_TOML.replace("[mdp]", "[mdp]\nvocab = 3");
        let err = Scenario::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("vocab"), "{err}");
        let bad = format!("{STANDARD_TOML}\n[rl.variants.ppo]\nkl_coef = 1.0\n");
        let err = Scenario::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("rl.variants.ppo"), "{err}");
    }

    #[test]
    fn schema_version_is_checked() {
        let bad = STANDARD_TOML.replace("schema_version = 1", "schema_version = 2");
        assert!(Scenario::from_toml_str(&bad).is_err());
    }

    #[test]
    fn variant_override_merges() {
        let sc = Scenario::standard();
        assert!(sc.rl[&Variant::KlPpo].kl_coef > 0.0);
        assert_eq!(sc.rl[&Variant::KlPpo].lr_actor, sc.rl[&Variant::Bspo].lr_actor);
        assert_eq!(sc.rl_config(Variant::Bspo, 9).seed, 9);
    }
}

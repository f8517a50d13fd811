//! Property suites for the supported operators, supported policy iteration
//! and the analytic gradients. Used by the `prove` command and the
//! acceptance tests.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::behavior::{fit_behavior, SequenceDataset, SupportMask, DEFAULT_EPSILON_BETA};
use crate::error::{Error, Result};
use crate::policy::StochasticPolicy;
use crate::reward_lab::{generate_preferences, FeatureMap, ScoreLmObjective};
use crate::rl_engine::{collect_batch, critic_loss, ppo_surrogate, CriticTable};
use crate::rng::{derive_seed, stream, unit_symmetric, LabRng};
use crate::seq_mdp::{rollout_from, TabularMdp, Token, TokenMdp, Vocab, DEFAULT_STATE_CAP};
use crate::supported_pi::{brute_force_optimal, is_behavior_supported, policy_iteration};
use crate::value_ops::{
    apply_q_operator, apply_v_operator, lift_v_to_q, solve_q_fixed_point, QMode, QTable, SolveOptions, VTable,
    ValueBounds, DEFAULT_V_MIN,
};

/// The supported Q and V operators under test.
pub trait Operators: Sync {
    fn q(&self, tab: &TabularMdp, mask: &SupportMask, pi: &StochasticPolicy, q: &QTable, b: &ValueBounds)
        -> Result<QTable>;
    fn v(&self, tab: &TabularMdp, mask: &SupportMask, pi: &StochasticPolicy, v: &VTable, b: &ValueBounds)
        -> Result<VTable>;
}

pub struct ExactOperators;

impl Operators for ExactOperators {
    fn q(&self, tab: &TabularMdp, mask: &SupportMask, pi: &StochasticPolicy, q: &QTable, b: &ValueBounds) -> Result<QTable> {
        apply_q_operator(tab, mask, pi, q, QMode::BehaviorSupported, b)
    }

    fn v(&self, tab: &TabularMdp, mask: &SupportMask, pi: &StochasticPolicy, v: &VTable, b: &ValueBounds) -> Result<VTable> {
        apply_v_operator(tab, mask, pi, v, b)
    }
}

/// Exact operators plus a constant on every supported entry. A mutation
/// fixture: the suites must reject it.
pub struct BiasedOperators {
    pub bias: f64,
}

impl Operators for BiasedOperators {
    fn q(&self, tab: &TabularMdp, mask: &SupportMask, pi: &StochasticPolicy, q: &QTable, b: &ValueBounds) -> Result<QTable> {
        let mut out = ExactOperators.q(tab, mask, pi, q, b)?;
        for s in tab.index().nonterminal() {
            for a in mask.support(s) {
                out.set(s, a, out.get(s, a) + self.bias);
            }
        }
        Ok(out)
    }

    fn v(&self, tab: &TabularMdp, mask: &SupportMask, pi: &StochasticPolicy, v: &VTable, b: &ValueBounds) -> Result<VTable> {
        let mut out = ExactOperators.v(tab, mask, pi, v, b)?;
        let index = tab.index();
        for s in index.nonterminal() {
            if mask.entered_supported(index, s) {
                out.values_mut()[s] += self.bias;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub vocab: usize,
    pub max_len: usize,
    pub n_prompts: usize,
    pub gamma: f64,
    /// Behavior rollouts; prompts are assigned round robin.
    pub n_sequences: usize,
}

/// A random token MDP with terminal rewards in [-1, 1] and the support of a
/// behavior policy fitted to random rollouts.
pub struct Instance {
    pub tab: TabularMdp,
    pub mask: SupportMask,
    pub bounds: ValueBounds,
    pub data: SequenceDataset,
}

impl std::fmt::Debug for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Instance")
            .field("states", &self.tab.n_states())
            .field("actions", &self.tab.n_actions())
            .field("gamma", &self.tab.gamma())
            .field("sequences", &self.data.len())
            .finish()
    }
}

pub fn random_instance(spec: InstanceSpec, seed: u64) -> Result<Instance> {
    let reward_seed = derive_seed(seed, &[1]);
    let reward = Arc::new(move |p: usize, t: &[Token]| {
        let h = t.iter().fold(derive_seed(reward_seed, &[p as u64]), |h, &x| derive_seed(h, &[x as u64]));
        unit_symmetric(h)
    });
    let mdp = TokenMdp::new(
        Vocab::new(spec.vocab, spec.vocab - 1)?,
        TokenMdp::uniform_prompts(spec.n_prompts),
        spec.max_len,
        spec.gamma,
        reward,
        -1.0,
        1.0,
    )?;
    let tab = TabularMdp::build(mdp, DEFAULT_STATE_CAP)?;
    let sampler = random_policy(&tab, &mut stream(seed, &[2]), 2.0);
    let records = (0..spec.n_sequences)
        .map(|i| {
            let p = i % spec.n_prompts;
            (p, rollout_from(&tab, &sampler, p, &mut stream(seed, &[3, i as u64])).tokens())
        })
        .collect();
    let data = SequenceDataset::new(records);
    let beta = fit_behavior(&data, tab.mdp(), DEFAULT_EPSILON_BETA)?;
    let mask = beta.support_mask(tab.index());
    let bounds = ValueBounds::for_mdp(tab.mdp(), DEFAULT_V_MIN)?;
    Ok(Instance { tab, mask, bounds, data })
}

pub fn random_policy(tab: &TabularMdp, rng: &mut LabRng, scale: f64) -> StochasticPolicy {
    let logits = (0..tab.n_states() * tab.n_actions())
        .map(|_| scale * rng.random_range(-1.0..1.0))
        .collect();
    StochasticPolicy::from_logits(tab.n_actions(), logits).expect("finite logits")
}

/// Random policy with zero mass on unsupported actions; uniform where the
/// support is empty.
pub fn random_supported_policy(tab: &TabularMdp, mask: &SupportMask, rng: &mut LabRng) -> StochasticPolicy {
    let v = tab.n_actions();
    let mut probs = vec![0.0; tab.n_states() * v];
    for s in 0..tab.n_states() {
        let row = &mut probs[s * v..(s + 1) * v];
        let support = mask.support(s);
        if support.is_empty() {
            row.fill(1.0 / v as f64);
            continue;
        }
        let w: Vec<f64> = support.iter().map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        for (&a, wa) in support.iter().zip(&w) {
            row[a] = wa / z;
        }
    }
    StochasticPolicy::from_table(v, probs).expect("normalized rows")
}

fn random_q(tab: &TabularMdp, rng: &mut LabRng, scale: f64) -> QTable {
    let mut q = QTable::zeros(tab.n_states(), tab.n_actions());
    for s in tab.index().nonterminal() {
        for a in 0..tab.n_actions() {
            q.set(s, a, scale * rng.random_range(-1.0..1.0));
        }
    }
    q
}

fn random_v(tab: &TabularMdp, rng: &mut LabRng, scale: f64) -> VTable {
    let mut v = VTable::zeros(tab.n_states());
    for s in tab.index().nonterminal() {
        v.values_mut()[s] = scale * rng.random_range(-1.0..1.0);
    }
    v
}

fn fixed_point_q(ops: &dyn Operators, inst: &Instance, pi: &StochasticPolicy) -> Result<QTable> {
    let mut q = QTable::zeros(inst.tab.n_states(), inst.tab.n_actions());
    let mut last = f64::INFINITY;
    for _ in 0..10_000 {
        let next = ops.q(&inst.tab, &inst.mask, pi, &q, &inst.bounds)?;
        last = next.sup_distance(&q);
        q = next;
        if last <= 1e-12 {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        iterations: 10_000,
        residual: last,
    })
}

fn fixed_point_v(ops: &dyn Operators, inst: &Instance, pi: &StochasticPolicy) -> Result<VTable> {
    let mut v = VTable::zeros(inst.tab.n_states());
    let mut last = f64::INFINITY;
    for _ in 0..10_000 {
        let next = ops.v(&inst.tab, &inst.mask, pi, &v, &inst.bounds)?;
        last = next.sup_distance(&v);
        v = next;
        if last <= 1e-12 {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence {
        iterations: 10_000,
        residual: last,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: usize,
    pub violations: usize,
    /// Largest observed value of the suite's error measure.
    pub worst: f64,
    pub elapsed: Duration,
    pub detail: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checks > 0 && self.violations == 0
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<13} {} {}/{} checks passed, worst {:.3e}, {:.2}s{}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.checks - self.violations,
            self.checks,
            self.worst,
            self.elapsed.as_secs_f64(),
            if self.detail.is_empty() { String::new() } else { format!(" ({})", self.detail) }
        )
    }
}

pub const SUITES: [&str; 7] = [
    "contraction",
    "sandwich",
    "id_exactness",
    "equivalence",
    "monotonicity",
    "supported",
    "gradients",
];

/// Suites whose names contain any of the comma-separated terms.
pub fn select(filter: Option<&str>) -> Result<Vec<&'static str>> {
    let Some(filter) = filter.map(str::trim).filter(|f| !f.is_empty()) else {
        return Ok(SUITES.to_vec());
    };
    let terms: Vec<&str> = filter.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    let chosen: Vec<&'static str> = SUITES
        .iter()
        .copied()
        .filter(|s| terms.iter().any(|t| s.contains(t)))
        .collect();
    if chosen.is_empty() {
        return Err(Error::config("filter", format!("no suite matches {filter:?}; known: {}", SUITES.join(", "))));
    }
    Ok(chosen)
}

pub fn run_suite(name: &str, ops: &dyn Operators) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut r = match name {
        "contraction" => contraction(ops)?,
        "sandwich" => sandwich(ops)?,
        "id_exactness" => id_exactness(ops)?,
        "equivalence" => equivalence(ops)?,
        "monotonicity" => monotonicity()?,
        "supported" => supported()?,
        "gradients" => gradients()?,
        other => return Err(Error::config("filter", format!("unknown suite {other}"))),
    };
    r.elapsed = start.elapsed();
    Ok(r)
}

pub fn run_suites(filter: Option<&str>, ops: &dyn Operators) -> Result<Vec<SuiteResult>> {
    select(filter)?.into_iter().map(|n| run_suite(n, ops)).collect()
}

/// The three operator-suite MDPs: vocabulary 4, horizon 5.
pub fn operator_instances() -> Result<Vec<Instance>> {
    [(101, 0.9), (102, 0.99), (103, 0.9)]
        .into_iter()
        .map(|(seed, gamma)| {
            random_instance(
                InstanceSpec {
                    vocab: 4,
                    max_len: 5,
                    n_prompts: 2,
                    gamma,
                    n_sequences: 60,
                },
                seed,
            )
        })
        .collect()
}

fn result(name: &'static str, checks: usize, violations: usize, worst: f64, detail: String) -> SuiteResult {
    SuiteResult {
        name,
        checks,
        violations,
        worst,
        elapsed: Duration::ZERO,
        detail,
    }
}

pub const CONTRACTION_PAIRS: usize = 1000;

fn contraction(ops: &dyn Operators) -> Result<SuiteResult> {
    let (mut checks, mut bad, mut worst) = (0, 0, 0.0f64);
    for (m, inst) in operator_instances()?.iter().enumerate() {
        let gamma = inst.tab.gamma();
        let mut rng = stream(7, &[m as u64]);
        for _ in 0..CONTRACTION_PAIRS {
            let pi = random_policy(&inst.tab, &mut rng, 3.0);
            let scale = [1.0, 10.0, 100.0][rng.random_range(0..3)];
            let (q1, q2) = (random_q(&inst.tab, &mut rng, scale), random_q(&inst.tab, &mut rng, scale));
            let lhs = ops.q(&inst.tab, &inst.mask, &pi, &q1, &inst.bounds)?
                .sup_distance(&ops.q(&inst.tab, &inst.mask, &pi, &q2, &inst.bounds)?);
            let d = q1.sup_distance(&q2);
            let (v1, v2) = (random_v(&inst.tab, &mut rng, scale), random_v(&inst.tab, &mut rng, scale));
            let lhs_v = ops.v(&inst.tab, &inst.mask, &pi, &v1, &inst.bounds)?
                .sup_distance(&ops.v(&inst.tab, &inst.mask, &pi, &v2, &inst.bounds)?);
            let d_v = v1.sup_distance(&v2);
            for (l, r) in [(lhs, d), (lhs_v, d_v)] {
                checks += 1;
                // Relative slack of a few ulps for the floating-point sums.
                if l > gamma * r * (1.0 + 1e-12) {
                    bad += 1;
                }
                if r > 0.0 {
                    worst = worst.max(l / (gamma * r));
                }
            }
        }
    }
    Ok(result("contraction", checks, bad, worst, "worst is max ratio to gamma".into()))
}

pub const POLICIES_PER_MDP: usize = 20;

fn sandwich(ops: &dyn Operators) -> Result<SuiteResult> {
    let (mut checks, mut bad, mut worst) = (0, 0, 0.0f64);
    for (m, inst) in operator_instances()?.iter().enumerate() {
        let mut rng = stream(8, &[m as u64]);
        let q_min = inst.bounds.q_min;
        for _ in 0..POLICIES_PER_MDP {
            let pi = random_policy(&inst.tab, &mut rng, 3.0);
            let qb = fixed_point_q(ops, inst, &pi)?;
            let qp = solve_q_fixed_point(
                &inst.tab,
                &inst.mask,
                &pi,
                QMode::Standard,
                &inst.bounds,
                SolveOptions::default(),
                None,
            )?
            .table;
            for s in inst.tab.index().nonterminal() {
                for a in 0..inst.tab.n_actions() {
                    checks += 1;
                    let x = qb.get(s, a);
                    let ok = if inst.mask.supported(s, a) {
                        worst = worst.max(x - qp.get(s, a)).max(q_min - x);
                        q_min <= x && x <= qp.get(s, a) + 1e-8
                    } else {
                        worst = worst.max((x - q_min).abs());
                        x == q_min
                    };
                    if !ok {
                        bad += 1;
                    }
                }
            }
        }
    }
    Ok(result("sandwich", checks, bad, worst, "worst is largest bound excess".into()))
}

fn id_exactness(ops: &dyn Operators) -> Result<SuiteResult> {
    let (mut checks, mut bad, mut worst) = (0, 0, 0.0f64);
    for (m, inst) in operator_instances()?.iter().enumerate() {
        let mut rng = stream(9, &[m as u64]);
        for _ in 0..POLICIES_PER_MDP {
            let pi = random_supported_policy(&inst.tab, &inst.mask, &mut rng);
            let qb = fixed_point_q(ops, inst, &pi)?;
            let qp = solve_q_fixed_point(
                &inst.tab,
                &inst.mask,
                &pi,
                QMode::Standard,
                &inst.bounds,
                SolveOptions::default(),
                None,
            )?
            .table;
            for s in inst.tab.index().nonterminal() {
                for a in inst.mask.support(s) {
                    checks += 1;
                    let d = (qb.get(s, a) - qp.get(s, a)).abs();
                    worst = worst.max(d);
                    if d > 1e-8 {
                        bad += 1;
                    }
                }
            }
        }
    }
    Ok(result("id_exactness", checks, bad, worst, "supported entries, supported policies".into()))
}

fn equivalence(ops: &dyn Operators) -> Result<SuiteResult> {
    let (mut checks, mut bad, mut worst) = (0, 0, 0.0f64);
    for (m, inst) in operator_instances()?.iter().enumerate() {
        let mut rng = stream(10, &[m as u64]);
        for k in 0..2 * POLICIES_PER_MDP {
            let pi = if k % 2 == 0 {
                random_supported_policy(&inst.tab, &inst.mask, &mut rng)
            } else {
                random_policy(&inst.tab, &mut rng, 3.0)
            };
            let qb = fixed_point_q(ops, inst, &pi)?;
            let lifted = lift_v_to_q(&inst.tab, &fixed_point_v(ops, inst, &pi)?);
            checks += 1;
            let d = qb.sup_distance(&lifted);
            worst = worst.max(d);
            if d > 1e-8 {
                bad += 1;
            }
        }
    }
    Ok(result("equivalence", checks, bad, worst, "lifted V fixed point against Q fixed point".into()))
}

pub const PI_INSTANCES: usize = 50;
pub const PI_BRUTE_FORCE_CAP: u128 = 200_000;

/// The first `PI_INSTANCES` seeds whose supported policy space is small
/// enough to enumerate, with their brute-force optima.
pub fn pi_instances() -> Result<Vec<(Instance, f64)>> {
    let mut out = Vec::new();
    let mut seed = 1000u64;
    while out.len() < PI_INSTANCES {
        let mut rng = stream(seed, &[0]);
        let spec = InstanceSpec {
            vocab: rng.random_range(3..=4),
            max_len: rng.random_range(3..=4),
            n_prompts: rng.random_range(1..=2),
            gamma: [0.9, 0.99][rng.random_range(0..2)],
            n_sequences: rng.random_range(4..=12),
        };
        let inst = random_instance(spec, seed)?;
        seed += 1;
        match brute_force_optimal(&inst.tab, &inst.mask, PI_BRUTE_FORCE_CAP) {
            Ok(bf) => out.push((inst, bf.performance)),
            Err(Error::CapExceeded { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn uniform_supported(tab: &TabularMdp, mask: &SupportMask) -> StochasticPolicy {
    let v = tab.n_actions();
    let mut probs = vec![0.0; tab.n_states() * v];
    for s in 0..tab.n_states() {
        let support = mask.support(s);
        let row = &mut probs[s * v..(s + 1) * v];
        if support.is_empty() {
            row.fill(1.0 / v as f64);
        } else {
            for &a in &support {
                row[a] = 1.0 / support.len() as f64;
            }
        }
    }
    StochasticPolicy::from_table(v, probs).expect("normalized rows")
}

fn monotonicity() -> Result<SuiteResult> {
    let (mut checks, mut bad, mut worst) = (0, 0, 0.0f64);
    let mut rounds = 0;
    for (inst, j_star) in pi_instances()? {
        let pi0 = uniform_supported(&inst.tab, &inst.mask);
        let trace = policy_iteration(&inst.tab, &inst.mask, &pi0, &inst.bounds, 200)?;
        rounds += trace.records.len();
        for w in trace.records.windows(2) {
            checks += 1;
            let drop = w[0].performance - w[1].performance;
            worst = worst.max(drop);
            if drop > 1e-9 {
                bad += 1;
            }
        }
        checks += 1;
        let gap = (trace.final_performance() - j_star).abs();
        worst = worst.max(gap);
        if gap > 1e-8 || !trace.converged {
            bad += 1;
        }
    }
    Ok(result(
        "monotonicity",
        checks,
        bad,
        worst,
        format!("{PI_INSTANCES} instances, {rounds} policies"),
    ))
}

fn supported() -> Result<SuiteResult> {
    let (mut checks, mut bad, mut worst) = (0, 0, 0.0f64);
    let mut empty = 0;
    for (inst, _) in pi_instances()? {
        let pi0 = uniform_supported(&inst.tab, &inst.mask);
        let trace = policy_iteration(&inst.tab, &inst.mask, &pi0, &inst.bounds, 200)?;
        empty += trace.empty_support_states.len();
        for rec in trace.records.iter().skip(1) {
            for s in inst.tab.index().nonterminal() {
                let support = inst.mask.support(s);
                if support.is_empty() {
                    continue;
                }
                checks += 1;
                let mass: f64 = (0..inst.tab.n_actions())
                    .filter(|a| !support.contains(a))
                    .map(|a| rec.policy.prob(s, a))
                    .sum();
                worst = worst.max(mass);
                if mass != 0.0 {
                    bad += 1;
                }
            }
            if !is_behavior_supported(&inst.tab, &rec.policy, &inst.mask) {
                bad += 1;
            }
        }
    }
    Ok(result(
        "supported",
        checks,
        bad,
        worst,
        format!("{empty} empty-support states excluded"),
    ))
}

pub const GRADIENT_POINTS: usize = 20;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-10)
}

fn gradients() -> Result<SuiteResult> {
    let inst = random_instance(
        InstanceSpec {
            vocab: 4,
            max_len: 4,
            n_prompts: 2,
            gamma: 0.9,
            n_sequences: 40,
        },
        77,
    )?;
    let tab = &inst.tab;
    let (n, v) = (tab.n_states(), tab.n_actions());
    let h = 1e-6;
    let mut rng = stream(78, &[]);
    let mut errs = Vec::new();
    for k in 0..GRADIENT_POINTS as u64 {
        // Actor surrogate.
        let old = random_policy(tab, &mut rng, 1.0);
        let mut batch = collect_batch(tab, &old, &inst.mask, 16, 79, k);
        for s in batch.steps_mut() {
            s.advantage = rng.random_range(-1.0..1.0);
            s.target = rng.random_range(-2.0..2.0);
        }
        let pi = random_policy(tab, &mut rng, 1.0);
        let (_, grad) = ppo_surrogate(&batch, &pi, 0.2);
        let dir: Vec<f64> = (0..n * v).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 = grad
            .iter()
            .map(|(&s, g)| g.iter().enumerate().map(|(a, x)| x * dir[s * v + a]).sum::<f64>())
            .sum();
        let at = |sign: f64| {
            let l: Vec<f64> = pi.logits().expect("softmax").iter().zip(&dir).map(|(l, d)| l + sign * h * d).collect();
            ppo_surrogate(&batch, &StochasticPolicy::from_logits(v, l).expect("finite"), 0.2).0
        };
        errs.push(rel_err(analytic, (at(1.0) - at(-1.0)) / (2.0 * h)));

        // Critic loss.
        let mut critic = CriticTable::zeros(tab);
        for s in tab.index().nonterminal() {
            critic.set(s, rng.random_range(-3.0..3.0));
        }
        let (_, grad) = critic_loss(&critic, &batch);
        let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 = grad.iter().map(|(&s, g)| g * dir[s]).sum();
        let at = |sign: f64| {
            let mut c = critic.clone();
            for s in tab.index().nonterminal() {
                c.set(s, critic.get(s) + sign * h * dir[s]);
            }
            critic_loss(&c, &batch).0
        };
        errs.push(rel_err(analytic, (at(1.0) - at(-1.0)) / (2.0 * h)));
    }

    // Preference and next-token loss.
    let gold = |p: usize, t: &[Token]| t.iter().map(|&x| (x as f64 - 1.0) * 0.5).sum::<f64>() + p as f64 * 0.1;
    let sampler = random_policy(tab, &mut rng, 1.0);
    let prefs = generate_preferences(tab, &gold, &sampler, 60, 80)?;
    let features = FeatureMap {
        dim: 16,
        n_actions: v,
        eos: tab.mdp().vocab().eos(),
    };
    let obj = ScoreLmObjective::new(&prefs.pairs, &prefs.sequences, tab.mdp(), features, 0.3);
    for _ in 0..GRADIENT_POINTS {
        let w: Vec<f64> = (0..obj.n_weights()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l: Vec<f64> = (0..obj.n_logits()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, gw, gl) = obj.loss_and_grad(&w, &l, true);
        let dw: Vec<f64> = (0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dl: Vec<f64> = (0..l.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 =
            gw.iter().zip(&dw).map(|(g, d)| g * d).sum::<f64>() + gl.iter().zip(&dl).map(|(g, d)| g * d).sum::<f64>();
        let at = |sign: f64| {
            let wp: Vec<f64> = w.iter().zip(&dw).map(|(x, d)| x + sign * h * d).collect();
            let lp: Vec<f64> = l.iter().zip(&dl).map(|(x, d)| x + sign * h * d).collect();
            obj.loss(&wp, &lp)
        };
        errs.push(rel_err(analytic, (at(1.0) - at(-1.0)) / (2.0 * h)));
    }
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    let bad = errs.iter().filter(|&&e| !(e <= 1e-4)).count();
    Ok(result(
        "gradients",
        errs.len(),
        bad,
        worst,
        format!("{GRADIENT_POINTS} points each for actor, critic, score model"),
    ))
}

use std::collections::HashMap;

use proptest::prelude::*;
use rand::Rng;

use bspo_core::behavior::{
    classify_response, fit_behavior, is_supported, BehaviorPolicy, Fallback, ResponseLabel, SupportMask,
};
use bspo_core::metrics_io::{fit_elo, win_rate, WinMatrix, DEFAULT_ELO_K};
use bspo_core::policy::StochasticPolicy;
use bspo_core::prove::{random_instance, random_policy, random_supported_policy, Instance, InstanceSpec};
use bspo_core::reward_lab::bt_probability;
use bspo_core::rng::stream;
use bspo_core::seq_mdp::{rollout, rollout_from, step, SeqState};
use bspo_core::supported_pi::{
    brute_force_optimal, discounted_occupancy, occupancy, performance, policy_iteration,
};
use bspo_core::value_ops::{
    apply_q_operator, apply_v_operator, solve_q_fixed_point, QMode, QTable, SolveOptions, VTable,
};

fn spec() -> impl Strategy<Value = InstanceSpec> {
    (3usize..=4, 2usize..=4, 1usize..=2, prop::sample::select(vec![0.5, 0.9, 0.99]), 3usize..=20).prop_map(
        |(vocab, max_len, n_prompts, gamma, n_sequences)| InstanceSpec {
            vocab,
            max_len,
            n_prompts,
            gamma,
            n_sequences,
        },
    )
}

fn instance() -> impl Strategy<Value = (Instance, u64)> {
    (spec(), any::<u64>()).prop_map(|(s, seed)| (random_instance(s, seed).expect("small instance"), seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rollouts_respect_horizon_and_reward_placement((inst, seed) in instance(), rseed in any::<u64>()) {
        let tab = &inst.tab;
        let pi = random_policy(tab, &mut stream(seed, &[9]), 1.5);
        let a = rollout(tab, &pi, rseed);
        let b = rollout(tab, &pi, rseed);
        prop_assert_eq!(a.tokens(), b.tokens());
        prop_assert!(a.len() <= tab.index().max_len());
        let terminal = tab.mdp().terminal_reward(&a.final_seq()).unwrap();
        prop_assert!((a.total_reward() - terminal).abs() < 1e-12);
    }

    #[test]
    fn transitions_are_pure((inst, _) in instance(), pick in any::<prop::sample::Index>(), a in 0usize..4) {
        let tab = &inst.tab;
        let states: Vec<usize> = tab.index().nonterminal().collect();
        let s = tab.index().state(states[pick.index(states.len())]).clone();
        let a = a % tab.n_actions();
        let t1 = step(tab.mdp(), &s, a).unwrap();
        let t2 = step(tab.mdp(), &s, a).unwrap();
        prop_assert_eq!(&t1, &t2);
        let mut expect = s.tokens.clone();
        expect.push(a);
        prop_assert_eq!(&t1.next.tokens, &expect);
    }

    #[test]
    fn raising_epsilon_never_grows_support((inst, _) in instance(), lo in 0.0f64..0.5, extra in 0.0f64..0.5) {
        let beta = fit_behavior(&inst.data, inst.tab.mdp(), lo).unwrap();
        let wide = beta.support_mask(inst.tab.index());
        let narrow = beta.with_epsilon(lo + extra).support_mask(inst.tab.index());
        for s in 0..inst.tab.n_states() {
            for a in 0..inst.tab.n_actions() {
                prop_assert!(!narrow.supported(s, a) || wide.supported(s, a));
            }
        }
    }

    #[test]
    fn observed_actions_are_supported_at_small_epsilon((inst, _) in instance()) {
        let eps = 1.0 / (2.0 * inst.data.len() as f64 * inst.tab.index().max_len() as f64);
        let beta = fit_behavior(&inst.data, inst.tab.mdp(), eps).unwrap();
        for (p, toks) in &inst.data.records {
            let mut prefix = SeqState::root(*p);
            for &a in toks {
                prop_assert!(is_supported(&beta, &prefix, a));
                prefix.tokens.push(a);
            }
        }
    }

    #[test]
    fn classification_matches_stepwise_support((inst, seed) in instance(), rseed in any::<u64>()) {
        let beta = fit_behavior(&inst.data, inst.tab.mdp(), 1e-4).unwrap();
        let pi = random_policy(&inst.tab, &mut stream(seed, &[4]), 1.0);
        let traj = rollout(&inst.tab, &pi, rseed);
        let every_step = traj.steps.iter().all(|st| inst.mask.supported(st.state, st.action));
        let c = classify_response(&beta, &traj);
        prop_assert_eq!(c.label == ResponseLabel::Supported, every_step);
        prop_assert_eq!(c.unsupported_count, inst.mask.count_unsupported(&traj));
    }

    #[test]
    fn q_operator_contracts((inst, seed) in instance()) {
        let tab = &inst.tab;
        let mut rng = stream(seed, &[5]);
        let pi = random_policy(tab, &mut rng, 2.0);
        let q1 = random_q(tab.n_states(), tab.n_actions(), &mut rng);
        let q2 = random_q(tab.n_states(), tab.n_actions(), &mut rng);
        for mode in [QMode::Standard, QMode::BehaviorSupported] {
            let t1 = apply_q_operator(tab, &inst.mask, &pi, &q1, mode, &inst.bounds).unwrap();
            let t2 = apply_q_operator(tab, &inst.mask, &pi, &q2, mode, &inst.bounds).unwrap();
            let d_in = nonterminal_q_distance(&inst, &q1, &q2);
            prop_assert!(t1.sup_distance(&t2) <= tab.gamma() * d_in * (1.0 + 1e-12));
        }
    }

    #[test]
    fn v_operator_contracts((inst, seed) in instance()) {
        let tab = &inst.tab;
        let mut rng = stream(seed, &[6]);
        let pi = random_policy(tab, &mut rng, 2.0);
        let index = tab.index();
        let rand_v = |rng: &mut bspo_core::rng::LabRng| {
            VTable::from_values(
                (0..tab.n_states())
                    .map(|s| if index.is_terminal(s) { 0.0 } else { rng.random_range(-20.0..20.0) })
                    .collect(),
            )
            .unwrap()
        };
        let v1 = rand_v(&mut rng);
        let v2 = rand_v(&mut rng);
        let t1 = apply_v_operator(tab, &inst.mask, &pi, &v1, &inst.bounds).unwrap();
        let t2 = apply_v_operator(tab, &inst.mask, &pi, &v2, &inst.bounds).unwrap();
        prop_assert!(t1.sup_distance(&t2) <= tab.gamma() * v1.sup_distance(&v2) * (1.0 + 1e-12));
    }

    #[test]
    fn full_support_operators_are_standard((inst, seed) in instance()) {
        let tab = &inst.tab;
        let mut rng = stream(seed, &[7]);
        let pi = random_policy(tab, &mut rng, 2.0);
        let full = SupportMask::full(tab.n_states(), tab.n_actions());
        let q = random_q(tab.n_states(), tab.n_actions(), &mut rng);
        let a = apply_q_operator(tab, &full, &pi, &q, QMode::BehaviorSupported, &inst.bounds).unwrap();
        let b = apply_q_operator(tab, &full, &pi, &q, QMode::Standard, &inst.bounds).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn performance_difference_identity((inst, seed) in instance()) {
        let tab = &inst.tab;
        let mut rng = stream(seed, &[8]);
        let pi = random_policy(tab, &mut rng, 2.0);
        let pi2 = random_policy(tab, &mut rng, 2.0);
        let full = SupportMask::full(tab.n_states(), tab.n_actions());
        let q = solve_q_fixed_point(tab, &full, &pi, QMode::Standard, &inst.bounds, SolveOptions::default(), None)
            .unwrap()
            .table;
        let d = discounted_occupancy(tab, &pi2);
        let gamma = tab.gamma();
        let mut rhs = 0.0;
        for s in tab.index().nonterminal() {
            let v_s: f64 = (0..tab.n_actions()).map(|a| pi.prob(s, a) * q.get(s, a)).sum();
            let adv: f64 = (0..tab.n_actions()).map(|a| pi2.prob(s, a) * (q.get(s, a) - v_s)).sum();
            rhs += d[s] * adv;
        }
        rhs /= 1.0 - gamma;
        let lhs = performance(tab, &pi2) - performance(tab, &pi);
        prop_assert!((lhs - rhs).abs() < 1e-9, "lhs {} rhs {}", lhs, rhs);
    }

    #[test]
    fn occupancy_sums_to_one_per_depth((inst, seed) in instance()) {
        let tab = &inst.tab;
        let pi = random_policy(tab, &mut stream(seed, &[10]), 2.0);
        let occ = occupancy(tab, &pi);
        let index = tab.index();
        // Mass at depth t that has not yet terminated, plus terminated mass, is 1.
        for depth in 0..=tab.index().max_len() {
            let live: f64 = (0..tab.n_states())
                .filter(|&s| index.depth(s) == depth && !index.is_terminal(s))
                .map(|s| occ[s])
                .sum();
            let done: f64 = (0..tab.n_states())
                .filter(|&s| index.depth(s) <= depth && index.is_terminal(s))
                .map(|s| occ[s])
                .sum();
            prop_assert!((live + done - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_support_iteration_reaches_unrestricted_optimum(s in spec(), seed in any::<u64>()) {
        let s = InstanceSpec { max_len: s.max_len.min(3), vocab: s.vocab.min(3), n_prompts: 1, ..s };
        let inst = random_instance(s, seed).unwrap();
        let tab = &inst.tab;
        let full = SupportMask::full(tab.n_states(), tab.n_actions());
        let pi0 = StochasticPolicy::uniform(tab.n_states(), tab.n_actions());
        let trace = policy_iteration(tab, &full, &pi0, &inst.bounds, 100).unwrap();
        let best = brute_force_optimal(tab, &full, 2_000_000).unwrap();
        prop_assert!((trace.final_performance() - best.performance).abs() < 1e-8);
        let pi_random = random_supported_policy(tab, &full, &mut stream(seed, &[11]));
        prop_assert!(performance(tab, &pi_random) <= best.performance + 1e-12);
    }

    #[test]
    fn bt_probabilities_are_complementary(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        prop_assert_eq!(bt_probability(a, b) + bt_probability(b, a), 1.0);
    }

    #[test]
    fn elo_shift_is_equivariant(w01 in 0.0f64..=1.0, w02 in 0.0f64..=1.0, w12 in 0.0f64..=1.0, shift in -500.0f64..500.0) {
        let w = vec![
            vec![0.5, w01, w02],
            vec![1.0 - w01, 0.5, w12],
            vec![1.0 - w02, 1.0 - w12, 0.5],
        ];
        let m = WinMatrix::new(vec!["a".into(), "b".into(), "c".into()], w).unwrap();
        let base = fit_elo(&m, DEFAULT_ELO_K, 200, 1000.0);
        let shifted = fit_elo(&m, DEFAULT_ELO_K, 200, 1000.0 + shift);
        for (x, y) in base.ratings.iter().zip(&shifted.ratings) {
            prop_assert!((y - x - shift).abs() < 1e-6);
        }
    }

    #[test]
    fn sampled_win_matrix_is_antisymmetric((inst, seed) in instance(), n in 1usize..40) {
        let tab = &inst.tab;
        let mut rng = stream(seed, &[12]);
        let policies: Vec<StochasticPolicy> = (0..3).map(|_| random_policy(tab, &mut rng, 2.0)).collect();
        let gold = |p: usize, t: &[usize]| tab.mdp().reward_fn().score(p, t);
        let prompts: Vec<usize> = (0..tab.mdp().n_prompts()).collect();
        let m = WinMatrix::from_pairwise(vec!["a".into(), "b".into(), "c".into()], |i, j| {
            win_rate(tab, &gold, &policies[i], &policies[j], &prompts, n, seed)
        })
        .unwrap();
        for i in 0..3 {
            prop_assert_eq!(m.w[i][i], 0.5);
            for j in 0..3 {
                prop_assert!((m.w[i][j] + m.w[j][i] - 1.0).abs() < 1e-9);
            }
        }
    }
}

fn random_q(n: usize, v: usize, rng: &mut bspo_core::rng::LabRng) -> QTable {
    QTable::from_values(v, (0..n * v).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap()
}

fn nonterminal_q_distance(inst: &Instance, a: &QTable, b: &QTable) -> f64 {
    inst.tab
        .index()
        .nonterminal()
        .flat_map(|s| (0..inst.tab.n_actions()).map(move |x| (s, x)))
        .map(|(s, x)| (a.get(s, x) - b.get(s, x)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn random_rollouts_stay_inside_enumeration() {
    let inst = random_instance(
        InstanceSpec {
            vocab: 5,
            max_len: 5,
            n_prompts: 3,
            gamma: 0.9,
            n_sequences: 10,
        },
        77,
    )
    .unwrap();
    let pi = random_policy(&inst.tab, &mut stream(77, &[1]), 1.0);
    let mut rng = stream(77, &[2]);
    for i in 0..10_000 {
        let traj = rollout_from(&inst.tab, &pi, i % 3, &mut rng);
        let seq = traj.final_seq();
        assert_eq!(inst.tab.index().id_of(&seq), Some(traj.final_state));
        for st in &traj.steps {
            assert!(st.state < inst.tab.n_states());
        }
    }
}

#[test]
fn uniform_policy_token_frequencies() {
    let inst = random_instance(
        InstanceSpec {
            vocab: 4,
            max_len: 3,
            n_prompts: 1,
            gamma: 0.9,
            n_sequences: 4,
        },
        3,
    )
    .unwrap();
    let pi = StochasticPolicy::uniform(inst.tab.n_states(), inst.tab.n_actions());
    let mut counts = [0usize; 4];
    let mut rng = stream(5, &[0]);
    let n = 20_000;
    for _ in 0..n {
        let traj = rollout_from(&inst.tab, &pi, 0, &mut rng);
        counts[traj.steps[0].action] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 0.25).abs() < 0.015, "first-token frequency {f}");
    }
}

#[test]
fn performance_agrees_with_monte_carlo() {
    let inst = random_instance(
        InstanceSpec {
            vocab: 4,
            max_len: 4,
            n_prompts: 2,
            gamma: 0.9,
            n_sequences: 10,
        },
        21,
    )
    .unwrap();
    let tab = &inst.tab;
    let pi = random_policy(tab, &mut stream(21, &[1]), 1.0);
    let n = 40_000;
    let mean: f64 = (0..n)
        .map(|i| {
            let traj = rollout(tab, &pi, i as u64);
            let depth = traj.len() as i32;
            tab.gamma().powi(depth - 1) * traj.total_reward()
        })
        .sum::<f64>()
        / n as f64;
    let exact = performance(tab, &pi);
    // rewards lie in [-1, 1], so the standard error is below 1/sqrt(n) = 0.005
    assert!((mean - exact).abs() < 0.02, "monte carlo {mean} vs exact {exact}");
}

#[test]
fn explicit_uniform_rows_give_full_support() {
    let inst = random_instance(
        InstanceSpec {
            vocab: 3,
            max_len: 3,
            n_prompts: 1,
            gamma: 0.9,
            n_sequences: 3,
        },
        4,
    )
    .unwrap();
    let beta = BehaviorPolicy::from_rows(3, 1e-4, Fallback::InheritUniform, HashMap::new()).unwrap();
    let mask = beta.support_mask(inst.tab.index());
    for s in inst.tab.index().nonterminal() {
        assert_eq!(mask.support(s), vec![0, 1, 2]);
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bspo_core::behavior::{BehaviorPolicy, Fallback, DEFAULT_EPSILON_BETA};
use bspo_core::metrics_io::{fit_elo, RunLog, WinMatrix, DEFAULT_ELO_K, DEFAULT_ELO_ROUNDS};
use bspo_core::prove::{run_suite, ExactOperators};
use bspo_core::reward_lab::accuracy_split;
use bspo_core::rl_engine::{run_variant_with_policy, RunContext, Variant};
use bspo_core::scenario::{AblationReport, Lab, OveroptReport, Scenario, DEFAULT_CHECKPOINTS};

struct Outcome {
    pass: bool,
    detail: String,
}

fn suite(name: &str, limit: Option<Duration>) -> Outcome {
    match run_suite(name, &ExactOperators) {
        Ok(r) => {
            let in_time = limit.is_none_or(|l| r.elapsed < l);
            Outcome {
                pass: r.passed() && in_time,
                detail: r.to_string(),
            }
        }
        Err(e) => Outcome {
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

fn both(a: Outcome, b: Outcome) -> Outcome {
    Outcome {
        pass: a.pass && b.pass,
        detail: format!("{}; {}", a.detail, b.detail),
    }
}

fn fmt_curve(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

struct StandardRuns {
    lab: Lab,
    ctx: RunContext,
    ppo: Vec<RunLog>,
    bspo: Vec<RunLog>,
    elapsed: Duration,
}

fn standard_runs() -> bspo_core::Result<StandardRuns> {
    let start = Instant::now();
    let lab = Lab::build(&Scenario::standard())?;
    let ctx = lab.context()?;
    let ppo = lab.run_seeds(&ctx, Variant::StandardPpo)?;
    let bspo = lab.run_seeds(&ctx, Variant::Bspo)?;
    Ok(StandardRuns {
        lab,
        ctx,
        ppo,
        bspo,
        elapsed: start.elapsed(),
    })
}

fn overoptimization(runs: &StandardRuns) -> Outcome {
    let r = match OveroptReport::new(&runs.ppo, &runs.bspo, DEFAULT_CHECKPOINTS) {
        Ok(r) => r,
        Err(e) => return Outcome { pass: false, detail: format!("error: {e}") },
    };
    let in_time = runs.elapsed < Duration::from_secs(15 * 60);
    Outcome {
        pass: r.ppo_overoptimizes() && r.bspo_holds() && r.bspo_wins_enough() && in_time,
        detail: format!(
            "PPO gold [{}] proxy [{}]; peak at checkpoint {} then declines {:.0}% of gain, proxy +{:.2}; \
             BSPO gold [{}] final margin {:.3} (pooled std {:.3}); BSPO wins {}/{} seeds; {:.1}s",
            fmt_curve(&r.ppo_gold),
            fmt_curve(&r.ppo_proxy),
            r.ppo_peak,
            100.0 * r.ppo_decline_frac,
            r.ppo_proxy_rise,
            fmt_curve(&r.bspo_gold),
            r.bspo_final_margin,
            r.bspo_pooled_std,
            r.bspo_wins,
            r.n_seeds,
            runs.elapsed.as_secs_f64()
        ),
    }
}

fn suppression(runs: &StandardRuns) -> Outcome {
    let r = match OveroptReport::new(&runs.ppo, &runs.bspo, DEFAULT_CHECKPOINTS) {
        Ok(r) => r,
        Err(e) => return Outcome { pass: false, detail: format!("error: {e}") },
    };
    Outcome {
        pass: r.suppresses_unsupported(),
        detail: format!(
            "unsupported/response PPO [{}] BSPO [{}]; final ratio {:.4}, PPO slope {:.4}",
            fmt_curve(&r.ppo_unsupported),
            fmt_curve(&r.bspo_unsupported),
            r.unsupported_ratio(),
            r.ppo_unsupported_slope
        ),
    }
}

fn accuracy(runs: &StandardRuns) -> Outcome {
    let lab = &runs.lab;
    let split = accuracy_split(lab.proxies[0].as_ref(), lab.gold.as_ref(), &lab.beta, &lab.eval_pairs);
    match split.both() {
        Ok((s, u)) => Outcome {
            pass: lab.eval_pairs.len() == 1000 && s - u >= 0.05,
            detail: format!(
                "supported {s:.3} ({} pairs) vs unsupported {u:.3} ({} pairs), gap {:.3}",
                split.n_supported,
                split.n_unsupported,
                s - u
            ),
        },
        Err(e) => Outcome { pass: false, detail: format!("error: {e}") },
    }
}

fn baseline_equivalence(runs: &StandardRuns) -> Outcome {
    let lab = &runs.lab;
    let full = match BehaviorPolicy::from_rows(
        lab.tab.n_actions(),
        DEFAULT_EPSILON_BETA,
        Fallback::InheritUniform,
        HashMap::new(),
    ) {
        Ok(b) => Arc::new(b),
        Err(e) => return Outcome { pass: false, detail: format!("error: {e}") },
    };
    let ctx = RunContext {
        beta: full,
        ..runs.ctx.clone()
    };
    let mut cfg = lab.scenario.rl_config(Variant::Bspo, 7);
    cfg.kl_coef = 0.0;
    cfg.total_steps = 60;
    let a = run_variant_with_policy(&cfg, Variant::Bspo, &ctx);
    let b = run_variant_with_policy(&cfg, Variant::StandardPpo, &ctx);
    match (a, b) {
        (Ok((la, pa)), Ok((lb, pb))) => {
            let body = |l: &RunLog| {
                l.to_csv()
                    .lines()
                    .map(|line| line.rsplit_once(',').map_or(line, |(head, _)| head).to_string())
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            let row_bits = |l: &RunLog| {
                l.rows
                    .iter()
                    .flat_map(|r| r.metrics().into_iter().map(f64::to_bits))
                    .collect::<Vec<_>>()
            };
            let same_csv = body(&la) == body(&lb) && row_bits(&la) == row_bits(&lb);
            let bits = |p: &bspo_core::policy::StochasticPolicy| {
                p.logits().unwrap_or_default().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            };
            let same_policy = bits(&pa) == bits(&pb);
            Outcome {
                pass: same_csv && same_policy && la.rows.len() == 61,
                detail: format!(
                    "{} logged rows; metric CSV identical: {same_csv}; final logits bit-identical: {same_policy}",
                    la.rows.len()
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome { pass: false, detail: format!("error: {e}") },
    }
}

fn elo() -> Outcome {
    let two = WinMatrix::new(vec!["a".into(), "b".into()], vec![vec![0.5, 0.75], vec![0.25, 0.5]]);
    let sym = WinMatrix::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![vec![0.5; 3], vec![0.5; 3], vec![0.5; 3]],
    );
    match (two, sym) {
        (Ok(two), Ok(sym)) => {
            let e = fit_elo(&two, DEFAULT_ELO_K, DEFAULT_ELO_ROUNDS, 1000.0);
            let gap = e.ratings[0] - e.ratings[1];
            let target = 400.0 * 3f64.log10();
            let s = fit_elo(&sym, DEFAULT_ELO_K, DEFAULT_ELO_ROUNDS, 1000.0);
            let spread = s.ratings.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - s.ratings.iter().cloned().fold(f64::INFINITY, f64::min);
            Outcome {
                pass: (gap - target).abs() <= 1.0 && spread == 0.0,
                detail: format!("gap {gap:.4} vs {target:.4}; symmetric spread {spread}"),
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome { pass: false, detail: format!("error: {e}") },
    }
}

fn ablation(runs: &StandardRuns) -> Outcome {
    let lab = &runs.lab;
    let mut sweep = Vec::new();
    for v_min in [-10.0, -15.0, -20.0, -25.0] {
        let logs: bspo_core::Result<Vec<RunLog>> = lab
            .scenario
            .seeds
            .iter()
            .map(|&seed| {
                let mut cfg = lab.scenario.rl_config(Variant::Bspo, seed);
                cfg.v_min = v_min;
                run_variant_with_policy(&cfg, Variant::Bspo, &runs.ctx).map(|(l, _)| l)
            })
            .collect();
        match logs {
            Ok(l) => sweep.push((v_min, l)),
            Err(e) => return Outcome { pass: false, detail: format!("v_min {v_min}: {e}") },
        }
    }
    match AblationReport::new(&sweep) {
        Ok(r) => Outcome {
            pass: r.within_two_std(),
            detail: format!(
                "final gold [{}] for v_min {:?}; spread {:.3} vs 2 x pooled std {:.3}",
                fmt_curve(&r.final_gold),
                r.v_min,
                r.spread,
                2.0 * r.pooled_std
            ),
        },
        Err(e) => Outcome { pass: false, detail: format!("error: {e}") },
    }
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "contraction", suite("contraction", Some(Duration::from_secs(30)))),
        (2, "fixed-point sandwich", suite("sandwich", Some(Duration::from_secs(60)))),
        (3, "ID-exactness and Q/V equivalence", both(suite("id_exactness", None), suite("equivalence", None))),
        (4, "monotonicity and optimality", suite("monotonicity", Some(Duration::from_secs(300)))),
        (5, "supported-policy guarantee", suite("supported", None)),
        (6, "gradient checks", suite("gradients", None)),
    ];
    match standard_runs() {
        Ok(runs) => {
            results.push((7, "over-optimization reproduction", overoptimization(&runs)));
            results.push((8, "unsupported-action suppression", suppression(&runs)));
            results.push((9, "accuracy split", accuracy(&runs)));
            results.push((10, "baseline equivalence", baseline_equivalence(&runs)));
            results.push((11, "ELO sanity", elo()));
            results.push((12, "v_min ablation", ablation(&runs)));
        }
        Err(e) => {
            for (i, name) in [
                (7, "over-optimization reproduction"),
                (8, "unsupported-action suppression"),
                (9, "accuracy split"),
                (10, "baseline equivalence"),
            ] {
                results.push((i, name, Outcome { pass: false, detail: format!("scenario failed: {e}") }));
            }
            results.push((11, "ELO sanity", elo()));
            results.push((12, "v_min ablation", Outcome { pass: false, detail: format!("scenario failed: {e}") }));
        }
    }
    let mut failed = 0;
    for (i, name, o) in &results {
        println!("criterion {i:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use bspo_core::behavior::SequenceDataset;
use bspo_core::metrics_io::{aggregate_runs, fit_elo, fmt_sig, sample_responses, win_rate_from_responses, RunLog, WinMatrix};
use bspo_core::policy::StochasticPolicy;
use bspo_core::prove::{run_suites, BiasedOperators, ExactOperators, Operators};
use bspo_core::rl_engine::Variant;
use bspo_core::scenario::{build_world, Lab, Scenario, SCHEMA_VERSION, STANDARD_TOML};
use bspo_core::seq_mdp::Token;

use crate::artifacts::{sha256_hex, Checkpoint, Manifest, OutDir, Versions};
use crate::error::{CliError, CliResult};
use crate::VariantChoice;

const BUILTIN: &str = "<builtin:standard>";

struct Loaded {
    scenario: Scenario,
    label: String,
    sha256: String,
}

fn load_scenario(path: Option<&Path>) -> CliResult<Loaded> {
    let (text, label) = match path {
        None => (STANDARD_TOML.to_string(), BUILTIN.to_string()),
        Some(p) => (
            fs::read_to_string(p).map_err(|e| CliError::Input(format!("scenario {}: {e}", p.display())))?,
            p.display().to_string(),
        ),
    };
    let scenario = Scenario::from_toml_str(&text)?;
    Ok(Loaded {
        scenario,
        label,
        sha256: sha256_hex(text.as_bytes()),
    })
}

fn manifest(command: &str, args: &[String], loaded: &Loaded, seeds: Vec<u64>) -> Manifest {
    Manifest {
        command: command.to_string(),
        args: args.to_vec(),
        scenario: loaded.scenario.name.clone(),
        scenario_path: loaded.label.clone(),
        config_sha256: loaded.sha256.clone(),
        schema_version: SCHEMA_VERSION,
        seeds,
        versions: Versions::current(),
        files: Vec::new(),
    }
}

pub fn prove(filter: Option<&str>, bias: Option<f64>) -> CliResult<()> {
    let ops: Box<dyn Operators> = match bias {
        Some(bias) => Box::new(BiasedOperators { bias }),
        None => Box::new(ExactOperators),
    };
    let results = run_suites(filter, ops.as_ref())?;
    for r in &results {
        println!("{r}");
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    println!("{passed}/{} suites passed", results.len());
    if passed == results.len() {
        Ok(())
    } else {
        Err(CliError::Failure(format!("{} suite(s) failed", results.len() - passed)))
    }
}

fn run_name(variant: &str, seed: u64) -> String {
    format!("{variant}_seed{seed}")
}

/// One block per variant, each the variant's seed aggregate.
fn combined_summary(by_variant: &BTreeMap<String, Vec<RunLog>>, order: &[String]) -> CliResult<String> {
    let mut out = String::from("variant,step,metric,mean,std\n");
    for name in order {
        let summary = aggregate_runs(&by_variant[name])?;
        for r in &summary.rows {
            let _ = writeln!(out, "{name},{},{},{},{}", r.step, r.metric, fmt_sig(r.mean), fmt_sig(r.std));
        }
    }
    Ok(out)
}

pub fn run(path: Option<&Path>, choice: VariantChoice, seed: Option<u64>, out: &Path, args: &[String]) -> CliResult<()> {
    let loaded = load_scenario(path)?;
    let variants = match choice {
        VariantChoice::All => Variant::ALL.to_vec(),
        VariantChoice::One(v) => vec![v],
    };
    let seeds = seed.map_or_else(|| loaded.scenario.seeds.clone(), |s| vec![s]);
    let mut dir = OutDir::create(out)?;
    let lab = Lab::build(&loaded.scenario)?;
    let ctx = lab.context()?;
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<(Variant, u64, RunLog, StochasticPolicy)> = jobs
        .par_iter()
        .map(|&(v, s)| lab.run_with_policy(&ctx, v, s).map(|(log, pi)| (v, s, log, pi)))
        .collect::<bspo_core::Result<_>>()?;
    let mut by_variant: BTreeMap<String, Vec<RunLog>> = BTreeMap::new();
    for (v, s, log, pi) in results {
        let name = run_name(v.name(), s);
        let last = log.rows.last().expect("runs log step 0");
        println!(
            "{name}: gold {} proxy {} unsupported/response {} after {} steps",
            fmt_sig(last.gold_reward_mean),
            fmt_sig(last.proxy_reward_mean),
            fmt_sig(last.unsupported_per_response),
            last.step
        );
        dir.write(&format!("{name}.csv"), &log.to_csv())?;
        let ckpt = Checkpoint::from_policy(&loaded.scenario.name, &loaded.sha256, v.name(), s, &pi)?;
        dir.write(&format!("{name}.policy.json"), &ckpt.to_json())?;
        by_variant.entry(v.name().to_string()).or_default().push(log);
    }
    if choice == VariantChoice::All {
        let order: Vec<String> = variants.iter().map(|v| v.name().to_string()).collect();
        dir.write("summary.csv", &combined_summary(&by_variant, &order)?)?;
    }
    dir.finish(manifest("run", args, &loaded, seeds))
}

fn checkpoint_files(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(".policy.json"))
                .collect();
            if found.is_empty() {
                return Err(CliError::Input(format!("no *.policy.json checkpoints in {}", p.display())));
            }
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::Input(format!("checkpoint {} does not exist", p.display())));
        }
    }
    Ok(files)
}

fn model_name(path: &Path, suffix: &str) -> String {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    file.strip_suffix(suffix).unwrap_or(&file).to_string()
}

type Responses = Vec<(usize, Vec<Token>)>;

pub fn eval(
    path: Option<&Path>,
    checkpoints: &[PathBuf],
    cached: Option<&Path>,
    out: &Path,
    args: &[String],
) -> CliResult<()> {
    let loaded = load_scenario(path)?;
    let sc = &loaded.scenario;
    let (tab, gold) = build_world(sc)?;
    let mut models: BTreeMap<String, Responses> = BTreeMap::new();
    let fresh = cached.is_none();
    if let Some(dir) = cached {
        let entries = fs::read_dir(dir).map_err(|e| CliError::Input(format!("responses {}: {e}", dir.display())))?;
        for f in entries.filter_map(|e| e.ok().map(|e| e.path())) {
            if f.extension().is_some_and(|x| x == "tsv") {
                let data = SequenceDataset::load(&f)?;
                data.validate(tab.mdp())?;
                models.insert(model_name(&f, ".tsv"), data.records);
            }
        }
        if models.is_empty() {
            return Err(CliError::Input(format!("no *.tsv responses in {}", dir.display())));
        }
    } else {
        let prompts: Vec<usize> = (0..sc.mdp.n_prompts).collect();
        for f in checkpoint_files(checkpoints)? {
            let name = model_name(&f, ".policy.json");
            let ckpt = Checkpoint::load(&f)?;
            if ckpt.config_sha256 != loaded.sha256 {
                return Err(CliError::Input(format!(
                    "checkpoint {} was trained on scenario {} ({}), not {}",
                    f.display(),
                    ckpt.scenario,
                    &ckpt.config_sha256[..12.min(ckpt.config_sha256.len())],
                    &loaded.sha256[..12]
                )));
            }
            let pi = ckpt.policy(&tab)?;
            let responses = sample_responses(&tab, &pi, &prompts, sc.eval.n_samples, sc.eval.seed);
            if models.insert(name.clone(), responses).is_some() {
                return Err(CliError::Input(format!("two checkpoints are named {name}")));
            }
        }
    }
    let names: Vec<String> = models.keys().cloned().collect();
    let responses: Vec<&Responses> = models.values().collect();
    let matrix = WinMatrix::from_pairwise(names.clone(), |i, j| {
        win_rate_from_responses(gold.as_ref(), responses[i], responses[j])
    })?;
    let elo = fit_elo(&matrix, sc.eval.elo_k, sc.eval.elo_rounds, sc.eval.init_rating);
    let mut dir = OutDir::create(out)?;
    if fresh {
        for (name, r) in &models {
            dir.write(&format!("responses/{name}.tsv"), &SequenceDataset::new(r.clone()).to_text())?;
        }
    }
    dir.write("win_matrix.csv", &matrix.to_csv())?;
    dir.write("elo.csv", &elo.to_csv())?;
    for (m, r) in elo.models.iter().zip(&elo.ratings) {
        println!("{m}: elo {}", fmt_sig(*r));
    }
    dir.finish(manifest("eval", args, &loaded, vec![sc.eval.seed]))
}

pub fn report(runs: &Path, out: Option<&Path>) -> CliResult<()> {
    let entries = fs::read_dir(runs).map_err(|e| CliError::Input(format!("runs {}: {e}", runs.display())))?;
    let mut logs: BTreeMap<String, Vec<RunLog>> = BTreeMap::new();
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    for f in files {
        let name = model_name(&f, ".csv");
        let Some((variant, seed)) = name.rsplit_once("_seed") else {
            continue;
        };
        let (Some(_), Ok(seed)) = (f.extension().filter(|x| *x == "csv"), seed.parse::<u64>()) else {
            continue;
        };
        let log = RunLog::from_csv(&fs::read_to_string(&f)?, seed)?;
        if log.variant != variant {
            return Err(CliError::Input(format!("{} holds a {} log", f.display(), log.variant)));
        }
        logs.entry(variant.to_string()).or_default().push(log);
    }
    if logs.is_empty() {
        return Err(CliError::Input(format!("no <variant>_seed<N>.csv run logs in {}", runs.display())));
    }
    let order: Vec<String> = Variant::ALL
        .iter()
        .map(|v| v.name().to_string())
        .filter(|n| logs.contains_key(n))
        .chain(logs.keys().filter(|k| Variant::parse(k).is_none()).cloned())
        .collect();
    println!("variant seeds gold_start gold_peak peak_step gold_final gold_final_std proxy_final unsupported_final");
    for name in &order {
        let summary = aggregate_runs(&logs[name])?;
        let gold: Vec<_> = summary.rows.iter().filter(|r| r.metric == "gold_reward_mean").collect();
        let proxy = summary.rows.iter().filter(|r| r.metric == "proxy_reward_mean").next_back();
        let unsup = summary.rows.iter().filter(|r| r.metric == "unsupported_per_response").next_back();
        let (Some(first), Some(last), Some(proxy), Some(unsup)) = (gold.first(), gold.last(), proxy, unsup) else {
            continue;
        };
        let peak = gold.iter().copied().fold(*first, |a, b| if b.mean > a.mean { b } else { a });
        println!(
            "{name} {} {} {} {} {} {} {} {}",
            logs[name].len(),
            fmt_sig(first.mean),
            fmt_sig(peak.mean),
            peak.step,
            fmt_sig(last.mean),
            fmt_sig(last.std),
            fmt_sig(proxy.mean),
            fmt_sig(unsup.mean)
        );
    }
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("summary.csv"), combined_summary(&logs, &order)?)?;
    }
    Ok(())
}

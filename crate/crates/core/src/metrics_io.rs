//! Evaluation and reporting: win rates, Elo fitting, run logs and their
//! aggregation, plus the shared float formatting used by every CSV writer.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::StochasticPolicy;
use crate::rng::stream;
use crate::seq_mdp::{rollout_from, SequenceReward, TabularMdp, Token};

/// Formats like C's `%.9g`.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub proxy_reward_mean: f64,
    pub gold_reward_mean: f64,
    pub kl_to_ref: f64,
    pub unsupported_per_response: f64,
    pub mean_length: f64,
}

pub const RUN_METRICS: [&str; 5] = [
    "proxy_reward_mean",
    "gold_reward_mean",
    "kl_to_ref",
    "unsupported_per_response",
    "mean_length",
];

impl RunRow {
    pub fn metrics(&self) -> [f64; 5] {
        [
            self.proxy_reward_mean,
            self.gold_reward_mean,
            self.kl_to_ref,
            self.unsupported_per_response,
            self.mean_length,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub variant: String,
    pub seed: u64,
    pub rows: Vec<RunRow>,
}

impl RunLog {
    pub fn new(variant: impl Into<String>, seed: u64) -> Self {
        Self {
            variant: variant.into(),
            seed,
            rows: Vec::new(),
        }
    }

    pub fn column(&self, metric: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.metrics()[metric]).collect()
    }

    pub fn gold(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.gold_reward_mean).collect()
    }

    pub fn proxy(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.proxy_reward_mean).collect()
    }

    pub fn unsupported(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.unsupported_per_response).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.step);
            for m in r.metrics() {
                let _ = write!(out, ",{}", fmt_sig(m));
            }
            let _ = writeln!(out, ",{}", self.variant);
        }
        out
    }

    /// Parses the output of `to_csv`. The CSV carries no seed, so the caller
    /// supplies it.
    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing run log header".into(),
                })
            }
        }
        let mut log: Option<RunLog> = None;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", fields.len())));
            }
            let num = |k: usize| fields[k].parse::<f64>().map_err(|e| bad(format!("field {k}: {e}")));
            let row = RunRow {
                step: fields[0].parse().map_err(|e| bad(format!("step: {e}")))?,
                proxy_reward_mean: num(1)?,
                gold_reward_mean: num(2)?,
                kl_to_ref: num(3)?,
                unsupported_per_response: num(4)?,
                mean_length: num(5)?,
            };
            let log = log.get_or_insert_with(|| RunLog::new(fields[6], seed));
            if log.variant != fields[6] {
                return Err(bad(format!("variant changes from {} to {}", log.variant, fields[6])));
            }
            log.rows.push(row);
        }
        log.ok_or(Error::Parse {
            line: 2,
            message: "run log has no rows".into(),
        })
    }
}

const CSV_HEADER: &str = "step,proxy_reward_mean,gold_reward_mean,kl_to_ref,unsupported_per_response,mean_length,variant";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub step: usize,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn get(&self, step: usize, metric: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.step == step && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,metric,mean,std\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.metric, fmt_sig(r.mean), fmt_sig(r.std));
        }
        out
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-step mean and standard deviation of every metric across logs.
pub fn aggregate_runs(logs: &[RunLog]) -> Result<Summary> {
    let first = logs.first().ok_or(Error::EmptyPartition("run logs"))?;
    let steps: Vec<usize> = first.rows.iter().map(|r| r.step).collect();
    for log in logs {
        let other: Vec<usize> = log.rows.iter().map(|r| r.step).collect();
        if other != steps {
            return Err(Error::GridMismatch(format!(
                "{} seed {} has {} steps, expected {}",
                log.variant,
                log.seed,
                other.len(),
                steps.len()
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, &step) in steps.iter().enumerate() {
        for (m, name) in RUN_METRICS.iter().enumerate() {
            let xs: Vec<f64> = logs.iter().map(|l| l.rows[i].metrics()[m]).collect();
            let (mean, std) = mean_std(&xs);
            rows.push(SummaryRow {
                step,
                metric: name,
                mean,
                std,
            });
        }
    }
    Ok(Summary { rows })
}

/// `k` evenly spaced row indices over `0..n`, both ends included.
pub fn checkpoints(n: usize, k: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if k <= 1 || n == 1 {
        return vec![n - 1];
    }
    let mut out: Vec<usize> = (0..k).map(|i| (i * (n - 1) + (k - 1) / 2) / (k - 1)).collect();
    out.dedup();
    out
}

/// Across-run mean and std of one metric at every logged step.
pub fn curve(logs: &[RunLog], metric: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let summary = aggregate_runs(logs)?;
    let rows: Vec<&SummaryRow> = summary.rows.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return Err(Error::config("metric", format!("unknown metric {metric}")));
    }
    Ok((rows.iter().map(|r| r.mean).collect(), rows.iter().map(|r| r.std).collect()))
}

/// Root mean square of per-checkpoint standard deviations.
pub fn pooled_std(stds: &[f64]) -> f64 {
    if stds.is_empty() {
        return 0.0;
    }
    (stds.iter().map(|s| s * s).sum::<f64>() / stds.len() as f64).sqrt()
}

/// Least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// One response per sample. Sample `i` uses prompt `prompts[i % len]` and the
/// RNG stream `(seed, i)`, so two policies sampled with the same seed share
/// their uniforms.
pub fn sample_responses(
    tab: &TabularMdp,
    pi: &StochasticPolicy,
    prompts: &[usize],
    n_samples: usize,
    seed: u64,
) -> Vec<(usize, Vec<Token>)> {
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let prompt = prompts[i % prompts.len()];
            let mut rng = stream(seed, &[i as u64]);
            let traj = rollout_from(tab, pi, prompt, &mut rng);
            (prompt, traj.tokens())
        })
        .collect()
}

/// Win fraction of `a` over `b` on paired responses; ties count one half.
pub fn win_rate_from_responses(
    gold: &dyn SequenceReward,
    a: &[(usize, Vec<Token>)],
    b: &[(usize, Vec<Token>)],
) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    // Counted in half-wins so the total is an exact integer.
    let halves: u64 = a
        .iter()
        .zip(b)
        .map(|((pa, ya), (pb, yb))| {
            let ga = gold.score(*pa, ya);
            let gb = gold.score(*pb, yb);
            if ga > gb {
                2
            } else if ga == gb {
                1
            } else {
                0
            }
        })
        .sum();
    Ok(halves as f64 / (2 * a.len()) as f64)
}

pub fn win_rate(
    tab: &TabularMdp,
    gold: &dyn SequenceReward,
    pi_a: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    prompts: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 || prompts.is_empty() {
        return Err(Error::EmptyPartition("win-rate samples"));
    }
    let a = sample_responses(tab, pi_a, prompts, n_samples, seed);
    let b = sample_responses(tab, pi_b, prompts, n_samples, seed);
    win_rate_from_responses(gold, &a, &b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinMatrix {
    pub models: Vec<String>,
    pub w: Vec<Vec<f64>>,
}

impl WinMatrix {
    pub fn new(models: Vec<String>, w: Vec<Vec<f64>>) -> Result<Self> {
        let n = models.len();
        if w.len() != n || w.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: w.len(),
            });
        }
        for i in 0..n {
            if (w[i][i] - 0.5).abs() > 1e-9 {
                return Err(Error::InvalidPolicy(format!("diagonal entry {i} is {}", w[i][i])));
            }
            for j in 0..n {
                if (w[i][j] + w[j][i] - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidPolicy(format!("w[{i}][{j}] + w[{j}][{i}] != 1")));
                }
            }
        }
        Ok(Self { models, w })
    }

    /// Builds the matrix from `f(i, j)` evaluated on the upper triangle only.
    pub fn from_pairwise(models: Vec<String>, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let n = models.len();
        let mut w = vec![vec![0.5; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let x = f(i, j)?;
                w[i][j] = x;
                w[j][i] = 1.0 - x;
            }
        }
        Self::new(models, w)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for m in &self.models {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for (m, row) in self.models.iter().zip(&self.w) {
            out.push_str(m);
            for x in row {
                let _ = write!(out, ",{}", fmt_sig(*x));
            }
            out.push('\n');
        }
        out
    }
}

pub const DEFAULT_ELO_K: f64 = 32.0;
pub const DEFAULT_ELO_ROUNDS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct EloScores {
    pub models: Vec<String>,
    pub ratings: Vec<f64>,
    pub k: f64,
    /// Largest absolute net rating change over the final sweep.
    pub last_sweep_change: f64,
}

impl EloScores {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,rating\n");
        for (m, r) in self.models.iter().zip(&self.ratings) {
            let _ = writeln!(out, "{m},{}", fmt_sig(*r));
        }
        out
    }
}

pub fn elo_expected(r_a: f64, r_b: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((r_b - r_a) / 400.0))
}

/// Sequential Elo updates over all ordered pairs in row-major order. Each
/// ordered pair is one match, so both ratings move by the same amount.
pub fn fit_elo(matrix: &WinMatrix, k: f64, rounds: usize, init_rating: f64) -> EloScores {
    let n = matrix.models.len();
    let mut ratings = vec![init_rating; n];
    let mut last_sweep_change = 0.0;
    for _ in 0..rounds {
        let before = ratings.clone();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let delta = k * (matrix.w[i][j] - elo_expected(ratings[i], ratings[j]));
                ratings[i] += delta;
                ratings[j] -= delta;
            }
        }
        last_sweep_change = ratings
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
    }
    EloScores {
        models: matrix.models.clone(),
        ratings,
        k,
        last_sweep_change,
    }
}

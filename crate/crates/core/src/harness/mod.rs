//! Seeded trial runs, scoring, and experiment aggregation.

mod report;
mod spec;

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{lambda_oracle, TrialState};
use crate::policies::{warm_start_len, Policy, PolicyDecision, PolicyKind, SelectionResult};
use crate::rng::{derive_seed, domain, stream_rng, Stream};
use crate::sim::{generate_environment, sample_episode, true_positive_set, Environment, Group};

pub use report::{
    load_summary, render_table, write_csv, write_outputs, Aggregate, CellSummary, EnvironmentInfo,
    EnvironmentRow, ExperimentReport, LambdaSetting, CSV_FILE, SUMMARY_FILE,
};
pub use spec::{ExperimentSpec, LambdaMode, DEFAULT_LAMBDA_SWEEP};

/// Result of one simulated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub selection: SelectionResult,
    /// `(subpopulation, group)` recruited at every episode.
    pub trace: Vec<PolicyDecision>,
}

/// Runs one trial of `horizon` episodes. All randomness comes from `seed`:
/// patient noise and randomized recruitment use separate streams.
pub fn run_trial(env: &Environment, policy: &Policy, horizon: usize, seed: u64) -> Result<TrialOutcome> {
    run_trial_observed(env, policy, horizon, seed, |_, _| Ok(()))
}

/// [`run_trial`], calling `observer(episode, state)` before every decision.
pub fn run_trial_observed<F>(
    env: &Environment,
    policy: &Policy,
    horizon: usize,
    seed: u64,
    mut observer: F,
) -> Result<TrialOutcome>
where
    F: FnMut(usize, &TrialState) -> Result<()>,
{
    let k = env.subpopulations();
    if horizon < warm_start_len(k) {
        return Err(Error::InvalidConfig(format!(
            "horizon {horizon} is shorter than the 2K = {} warm-start episodes",
            warm_start_len(k)
        )));
    }
    let mut noise = stream_rng(seed, Stream::Noise);
    let mut decisions = stream_rng(seed, Stream::Decisions);
    let mut state = TrialState::for_environment(env);
    let mut trace = Vec::with_capacity(horizon);

    let wrap = |episode: usize, source: Error| Error::Trial {
        episode,
        policy: policy.kind().name().to_string(),
        source: Box::new(source),
    };

    for episode in 0..horizon {
        observer(episode, &state).map_err(|e| wrap(episode, e))?;
        let d = policy
            .decide(&state, episode, &mut decisions)
            .map_err(|e| wrap(episode, e))?;
        let observed = sample_episode(env, d.subpopulation, d.group, &mut noise)?;
        state.record(d.subpopulation, d.group, &observed)?;
        trace.push(d);
    }
    let selection = policy.finalize(&state).map_err(|e| wrap(horizon, e))?;
    Ok(TrialOutcome { selection, trace })
}

/// False and true positive rates; `None` where the denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub fpr: Option<f64>,
    pub tpr: Option<f64>,
}

pub fn fpr_tpr(selected: &BTreeSet<usize>, truth: &BTreeSet<usize>, k: usize) -> Rates {
    let positives = truth.len();
    let negatives = k - positives;
    let hits = selected.intersection(truth).count();
    let false_hits = selected.iter().filter(|i| !truth.contains(i) && **i < k).count();
    Rates {
        fpr: (negatives > 0).then(|| false_hits as f64 / negatives as f64),
        tpr: (positives > 0).then(|| hits as f64 / positives as f64),
    }
}

/// Share of episodes assigned to the treatment group.
pub fn allocation_proportion(trace: &[PolicyDecision]) -> Option<f64> {
    if trace.is_empty() {
        return None;
    }
    let treated = trace.iter().filter(|d| d.group == Group::Treatment).count();
    Some(treated as f64 / trace.len() as f64)
}

/// Seed of environment `index` under `master`.
pub fn environment_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, &[domain::ENVIRONMENT, index as u64])
}

/// Seed of run `run` in environment `env_index`. Shared by every policy so
/// that comparisons use common random numbers.
pub fn run_seed(master: u64, env_index: usize, run: usize) -> u64 {
    derive_seed(master, &[domain::RUN, env_index as u64, run as u64])
}

pub fn environment_for(spec: &ExperimentSpec, index: usize) -> Result<Environment> {
    let seed = environment_seed(spec.sim.seed, index);
    generate_environment(&spec.sim, &mut stream_rng(seed, Stream::Environment))
}

#[derive(Debug, Clone, Copy)]
struct RunMetrics {
    fpr: Option<f64>,
    tpr: Option<f64>,
    alloc: f64,
}

/// One (policy, lambda) column of an experiment.
#[derive(Debug, Clone, PartialEq)]
struct Cell {
    kind: PolicyKind,
    lambda: LambdaSetting,
}

fn cells(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut out = Vec::new();
    for &kind in &spec.policies {
        if !kind.uses_lambda() {
            out.push(Cell {
                kind,
                lambda: LambdaSetting::Unused,
            });
            continue;
        }
        match &spec.lambda {
            LambdaMode::Oracle => out.push(Cell {
                kind,
                lambda: LambdaSetting::Oracle,
            }),
            LambdaMode::Fixed(v) => out.push(Cell {
                kind,
                lambda: LambdaSetting::Fixed(*v),
            }),
            LambdaMode::Sweep(values) => out.extend(values.iter().map(|v| Cell {
                kind,
                lambda: LambdaSetting::Fixed(*v),
            })),
        }
    }
    out
}

/// Runs every (environment, policy, lambda, run) combination and aggregates.
///
/// Work items run on a rayon pool of `threads` workers (rayon's default,
/// which honours `RAYON_NUM_THREADS`, when `None`). Results are reduced in
/// item order, so the report does not depend on the worker count.
pub fn run_experiment(spec: &ExperimentSpec, threads: Option<usize>) -> Result<ExperimentReport> {
    spec.validate()?;
    let started = Instant::now();

    let needs_lambda = spec.policies.iter().any(|k| k.uses_lambda());
    let mut environments = Vec::with_capacity(spec.n_environments);
    let mut infos = Vec::with_capacity(spec.n_environments);
    for e in 0..spec.n_environments {
        let env = environment_for(spec, e)?;
        let (oracle_lambda, lambda_note) = if needs_lambda && spec.lambda == LambdaMode::Oracle {
            match lambda_oracle(&env) {
                Ok(v) => (Some(v), None),
                Err(err) => (
                    Some(spec.lambda_fallback),
                    Some(format!("oracle unavailable ({err}); used lambda_fallback = {}", spec.lambda_fallback)),
                ),
            }
        } else {
            (None, None)
        };
        infos.push(EnvironmentInfo {
            index: e,
            seed: environment_seed(spec.sim.seed, e),
            positives: true_positive_set(&env).len(),
            oracle_lambda,
            lambda_note,
        });
        environments.push(env);
    }

    let cells = cells(spec);
    let runs = spec.n_runs_per_environment;
    let items: Vec<(usize, usize, usize)> = (0..environments.len())
        .flat_map(|e| (0..cells.len()).flat_map(move |c| (0..runs).map(move |r| (e, c, r))))
        .collect();

    let truths: Vec<BTreeSet<usize>> = environments.iter().map(true_positive_set).collect();
    let work = |&(e, c, r): &(usize, usize, usize)| -> std::result::Result<RunMetrics, String> {
        let env = &environments[e];
        let cell = &cells[c];
        let lambda = match cell.lambda {
            LambdaSetting::Unused => 0.0,
            LambdaSetting::Oracle => infos[e].oracle_lambda.expect("oracle lambda computed"),
            LambdaSetting::Fixed(v) => v,
        };
        let policy = Policy::with_params(cell.kind, lambda, spec.sim.sigma).map_err(|e| e.to_string())?;
        let outcome =
            run_trial(env, &policy, spec.horizon, run_seed(spec.sim.seed, e, r)).map_err(|e| e.to_string())?;
        let rates = fpr_tpr(&outcome.selection.selected, &truths[e], env.subpopulations());
        Ok(RunMetrics {
            fpr: rates.fpr,
            tpr: rates.tpr,
            alloc: allocation_proportion(&outcome.trace).unwrap_or(f64::NAN),
        })
    };

    let results: Vec<std::result::Result<RunMetrics, String>> = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(|| items.par_iter().map(work).collect()),
        None => items.par_iter().map(work).collect(),
    };

    let mut rows = Vec::new();
    for (e, info) in infos.iter().enumerate() {
        for (c, cell) in cells.iter().enumerate() {
            let start = (e * cells.len() + c) * runs;
            let chunk = &results[start..start + runs];
            let ok: Vec<RunMetrics> = chunk.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
            let first_failure = chunk.iter().find_map(|r| r.as_ref().err().cloned());
            let mean_of = |vals: Vec<f64>| -> Option<f64> {
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let lambda = match cell.lambda {
                LambdaSetting::Unused => None,
                LambdaSetting::Oracle => info.oracle_lambda,
                LambdaSetting::Fixed(v) => Some(v),
            };
            rows.push(EnvironmentRow {
                policy: cell.kind,
                lambda_setting: cell.lambda.clone(),
                environment_index: e,
                environment_seed: info.seed,
                regime: spec.regime_label(),
                horizon: spec.horizon,
                lambda,
                fpr: mean_of(ok.iter().filter_map(|m| m.fpr).collect()),
                tpr: mean_of(ok.iter().filter_map(|m| m.tpr).collect()),
                alloc: mean_of(ok.iter().map(|m| m.alloc).collect()),
                runs: ok.len(),
                failures: chunk.len() - ok.len(),
                first_failure,
            });
        }
    }

    let summaries = cells
        .iter()
        .map(|cell| CellSummary::from_rows(cell.kind, cell.lambda.clone(), &rows))
        .collect();

    Ok(ExperimentReport {
        spec: spec.clone(),
        environments: infos,
        rows,
        summaries,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

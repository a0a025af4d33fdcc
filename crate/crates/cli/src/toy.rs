//! `train-toy`: one agent per (risk level, seed) on the windy gridworld.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml               resolved config
//! seeds.json                seed and initialization seed of every agent
//! metrics/<name>.jsonl      one record per update
//! checkpoints/<name>.ckpt   latest agent state, optimizer moments included
//! visitation/<name>.csv     state-visitation frequencies of the evaluation
//! summary.json              evaluation results
//! ```
//!
//! `<name>` is `tau<τ with two decimals>_seed<seed>`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use rpbt_core::checkpoint::Checkpoint;
use rpbt_core::envs::GridConfig;
use rpbt_core::json_line;
use rpbt_core::rppo::UpdateDiagnostics;
use rpbt_core::toy::{evaluate_toy, new_toy_agent, train_toy, ToyConfig};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::rundir::{self, append_lines, json_u64, retain_lines, write_atomic, Mode, RunDir};
use crate::{Failure, TrainToyArgs};

#[derive(Debug, Serialize)]
struct ToyMetric<'a> {
    #[serde(flatten)]
    diag: &'a UpdateDiagnostics,
    /// Episodes finished during the rollout and their mean return.
    episodes: usize,
    mean_return: Option<f64>,
}

#[derive(Debug, Serialize)]
struct JobSeed {
    name: String,
    tau: f64,
    seed: u64,
    init_seed: u64,
}

#[derive(Debug, Serialize)]
pub struct JobSummary {
    pub name: String,
    pub tau: f64,
    pub seed: u64,
    pub steps: u64,
    pub updates: u64,
    pub water_adjacent_fraction: f64,
    pub water_fraction: f64,
    pub success_rate: f64,
    pub mean_success_length: Option<f64>,
}

fn job_name(tau: f64, seed: u64) -> String {
    format!("tau{tau:.2}_seed{seed}")
}

pub fn run(args: TrainToyArgs) -> Result<(), Failure> {
    let mode = Mode::from_flags(args.run.force, args.run.resume)?;
    let mut cfg = if mode == Mode::Resume {
        if args.run.config.config.is_some() {
            return Err(Failure::config(anyhow!("--resume uses the stored config; drop --config")));
        }
        ExperimentConfig::load(&args.run.out.join(rundir::CONFIG_FILE)).map_err(Failure::config)?
    } else {
        args.run.config.load()?
    };
    if let Some(w) = args.run.workers {
        cfg.workers = w;
    }
    if let Some(s) = args.seed {
        cfg.toy.seeds = vec![s];
    }
    if let Some(s) = args.seeds {
        cfg.toy.seeds = s;
    }
    if let Some(t) = args.taus {
        cfg.toy.taus = t;
    }
    if let Some(n) = args.steps {
        cfg.toy.total_steps = n;
    }
    cfg.validate().map_err(Failure::config)?;
    let grid = cfg.gridworld.to_core().map_err(Failure::config)?;
    let mut jobs = Vec::new();
    let mut names = HashSet::new();
    for &seed in &cfg.toy.seeds {
        for &tau in &cfg.toy.taus {
            let name = job_name(tau, seed);
            if !names.insert(name.clone()) {
                return Err(Failure::config(anyhow!("duplicate agent {name}")));
            }
            jobs.push((name, tau, seed));
        }
    }

    let dir = RunDir::open(&args.run.out, mode)?;
    prepare(&dir, &cfg, &grid, &jobs).map_err(Failure::runtime)?;
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(Failure::runtime)?;
    let results: Vec<anyhow::Result<JobSummary>> = threads.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|(name, tau, seed)| run_job(&dir, &cfg, &grid, name, *tau, *seed, mode == Mode::Resume))
            .collect()
    });
    let mut summaries = Vec::new();
    for r in results {
        summaries.push(r.map_err(Failure::runtime)?);
    }
    let json = serde_json::to_string_pretty(&summaries).map_err(Failure::runtime)?;
    write_atomic(&dir.path("summary.json"), json.as_bytes()).map_err(Failure::runtime)?;
    println!("{:<16} {:>8} {:>14} {:>8} {:>10}", "agent", "steps", "water_adjacent", "success", "mean_len");
    for s in &summaries {
        let len = s.mean_success_length.map_or("-".to_string(), |l| format!("{l:.2}"));
        println!(
            "{:<16} {:>8} {:>14.4} {:>8.3} {:>10}",
            s.name, s.steps, s.water_adjacent_fraction, s.success_rate, len
        );
    }
    Ok(())
}

fn prepare(dir: &RunDir, cfg: &ExperimentConfig, grid: &GridConfig, jobs: &[(String, f64, u64)]) -> anyhow::Result<()> {
    write_atomic(&dir.path(rundir::CONFIG_FILE), cfg.to_toml().as_bytes())?;
    for sub in ["metrics", "checkpoints", "visitation"] {
        dir.subdir(sub)?;
    }
    let mut seeds = Vec::new();
    for (name, tau, seed) in jobs {
        let toy = ToyConfig {
            rppo: cfg.toy.rppo.to_core(*tau)?,
            total_steps: cfg.toy.total_steps,
            seed: *seed,
        };
        seeds.push(JobSeed {
            name: name.clone(),
            tau: *tau,
            seed: *seed,
            init_seed: new_toy_agent(grid, &toy)?.seed,
        });
    }
    write_atomic(&dir.path("seeds.json"), serde_json::to_string_pretty(&seeds)?.as_bytes())
}

fn run_job(dir: &RunDir, cfg: &ExperimentConfig, grid: &GridConfig, name: &str, tau: f64, seed: u64, resume: bool) -> anyhow::Result<JobSummary> {
    let toy = ToyConfig {
        rppo: cfg.toy.rppo.to_core(tau)?,
        total_steps: cfg.toy.total_steps,
        seed,
    };
    let ckpt_path = dir.path("checkpoints").join(format!("{name}.ckpt"));
    let metrics_path = dir.path("metrics").join(format!("{name}.jsonl"));
    let mut agent = if resume && ckpt_path.exists() {
        let agent = Checkpoint::load(&ckpt_path)?.into_agent(toy.rppo.clone())?;
        let done = agent.updates;
        retain_lines(&metrics_path, |_, line| Ok(json_u64(line, "update")? <= done))?;
        agent
    } else {
        remove_if_exists(&metrics_path)?;
        new_toy_agent(grid, &toy)?
    };
    let mut metrics = append_lines(&metrics_path)?;
    let every = cfg.toy.checkpoint_every;
    let mut io_error = None;
    let trained = train_toy(grid, &toy, &mut agent, |diag, agent, finished| {
        let mean_return = (!finished.is_empty()).then(|| finished.iter().map(|f| f.0).sum::<f64>() / finished.len() as f64);
        let record = ToyMetric {
            diag,
            episodes: finished.len(),
            mean_return,
        };
        let written = writeln!(metrics, "{}", json_line(&record)).map_err(anyhow::Error::from);
        let saved = if diag.update % every == 0 {
            Checkpoint::from_agent(agent, true).save(&ckpt_path).map_err(anyhow::Error::from)
        } else {
            Ok(())
        };
        if let Err(e) = written.and(saved) {
            io_error = Some(e);
            return Err(rpbt_core::Error::Domain("metric output failed".into()));
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e.context(format!("training {name}")));
    }
    trained.with_context(|| format!("training {name}"))?;
    Checkpoint::from_agent(&agent, true).save(&ckpt_path)?;

    let eval = evaluate_toy(grid, &agent, cfg.toy.eval_episodes, seed, cfg.toy.greedy_eval)?;
    write_atomic(&dir.path("visitation").join(format!("{name}.csv")), eval.visitation.to_csv().as_bytes())?;
    eprintln!("{name}: {} steps, water-adjacent fraction {:.4}", agent.steps, eval.water_adjacent_fraction);
    Ok(JobSummary {
        name: name.to_string(),
        tau,
        seed,
        steps: agent.steps,
        updates: agent.updates,
        water_adjacent_fraction: eval.water_adjacent_fraction,
        water_fraction: eval.water_fraction,
        success_rate: eval.success_rate,
        mean_success_length: eval.mean_success_length,
    })
}

fn remove_if_exists(path: &Path) -> anyhow::Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(anyhow!(e).context(format!("cannot remove {}", path.display()))),
        _ => Ok(()),
    }
}

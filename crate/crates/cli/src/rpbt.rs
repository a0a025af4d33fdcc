//! `train-rpbt`: population-based self-play on the duel game.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml             resolved config
//! seeds.json              run seed and per-agent initialization seeds
//! metrics.jsonl           one record per agent update
//! elo_history.jsonl       ratings and champion after every round
//! tau_history.csv         risk level of every agent after every round
//! exploits.jsonl          exploit/explore events
//! pool/manifest.jsonl     one record per pool snapshot
//! pool/<id>.ckpt          policy-only snapshot files
//! checkpoints/agent<i>.ckpt  current agents, optimizer moments included
//! state.json              last completed round and ratings
//! champion.ckpt           best-rated agent at the end
//! champion.json           champion record against a uniform-random policy
//! ```
//!
//! Round 0 rows describe the initial population. A round's files are all
//! written before `state.json` moves forward, so `--resume` drops any rows
//! past the recorded round and continues from there.

use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use rpbt_core::checkpoint::Checkpoint;
use rpbt_core::envs::GridDuel;
use rpbt_core::population::{run_round, select_champion, EloTable, PolicyPool, PopulationState};
use rpbt_core::rppo::{play_match, Opponent, UpdateDiagnostics};
use rpbt_core::{json_line, seeded_rng};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::rundir::{self, append_lines, json_u64, retain_lines, write_atomic, Mode, RunDir};
use crate::{Failure, TrainRpbtArgs};

const STREAM_CHAMPION: u64 = 7 << 40;

#[derive(Debug, Serialize)]
struct UpdateRecord<'a> {
    round: usize,
    agent: usize,
    opponent: usize,
    #[serde(flatten)]
    diag: &'a UpdateDiagnostics,
}

#[derive(Debug, Serialize)]
struct EloRecord<'a> {
    round: usize,
    ratings: &'a [f64],
    champion: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolRecord {
    id: usize,
    agent: usize,
    round: usize,
    tau: f64,
    fingerprint: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunState {
    round: usize,
    elo: EloTable,
}

#[derive(Debug, Serialize)]
struct ChampionRecord {
    agent: usize,
    tau: f64,
    rating: f64,
    games: usize,
    wins: usize,
    draws: usize,
    losses: usize,
    win_rate: f64,
}

pub fn run(args: TrainRpbtArgs) -> Result<(), Failure> {
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
        if mode == Mode::Resume && s != cfg.rpbt.seed {
            return Err(Failure::config(anyhow!("--seed differs from the stored run seed {}", cfg.rpbt.seed)));
        }
        cfg.rpbt.seed = s;
    }
    if let Some(r) = args.rounds {
        cfg.rpbt.rounds = r;
    }
    if let Some(t) = args.taus {
        if mode == Mode::Resume && t != cfg.rpbt.initial_taus {
            return Err(Failure::config(anyhow!("--taus cannot change on resume")));
        }
        cfg.rpbt.initial_taus = t;
    }
    cfg.validate().map_err(Failure::config)?;
    let dir = RunDir::open(&args.run.out, mode)?;
    train(&dir, &cfg, mode == Mode::Resume).map_err(Failure::runtime)
}

fn train(dir: &RunDir, cfg: &ExperimentConfig, resume: bool) -> anyhow::Result<()> {
    let duel = cfg.duel.to_core();
    let make_game = || GridDuel::new(duel).expect("validated duel config");
    write_atomic(&dir.path(rundir::CONFIG_FILE), cfg.to_toml().as_bytes())?;
    dir.subdir("pool")?;
    dir.subdir("checkpoints")?;
    let n = cfg.rpbt.initial_taus.len();

    let mut pop = if resume && dir.path("state.json").exists() {
        restore(dir, cfg)?
    } else {
        let rppo = cfg.rpbt.rppo.to_core(0.5)?;
        let pop = PopulationState::new(&make_game(), cfg.rpbt.population(), &rppo, cfg.rpbt.seed)?;
        for f in ["metrics.jsonl", "elo_history.jsonl", "exploits.jsonl", "tau_history.csv", "pool/manifest.jsonl"] {
            let _ = std::fs::remove_file(dir.path(f));
        }
        let seeds = serde_json::json!({
            "seed": cfg.rpbt.seed,
            "agents": pop.agents.iter().enumerate().map(|(i, a)| serde_json::json!({
                "agent": i,
                "tau": a.tau(),
                "init_seed": a.seed,
            })).collect::<Vec<_>>(),
        });
        write_atomic(&dir.path("seeds.json"), serde_json::to_string_pretty(&seeds)?.as_bytes())?;
        let header = std::iter::once("round".to_string()).chain((0..n).map(|i| format!("agent{i}"))).collect::<Vec<_>>();
        writeln!(append_lines(&dir.path("tau_history.csv"))?, "{}", header.join(","))?;
        persist_round(dir, &pop, &[], 0)?;
        pop
    };

    let mut metrics = append_lines(&dir.path("metrics.jsonl"))?;
    let mut exploits = append_lines(&dir.path("exploits.jsonl"))?;
    while pop.round < cfg.rpbt.rounds {
        let (next, report) = run_round(&pop, make_game, cfg.workers)?;
        for a in &report.agents {
            for (diag, opponent) in a.updates.iter().zip(&a.opponents) {
                let rec = UpdateRecord {
                    round: report.round,
                    agent: a.agent,
                    opponent: *opponent,
                    diag,
                };
                writeln!(metrics, "{}", json_line(&rec))?;
            }
        }
        for e in &report.exploits {
            let mut v = serde_json::to_value(e)?;
            v["round"] = report.round.into();
            writeln!(exploits, "{}", json_line(&v))?;
        }
        let first_new = pop.pool.len();
        pop = next;
        persist_round(dir, &pop, &report.ratings, first_new)?;
        let taus = report.taus.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(" ");
        eprintln!(
            "round {}: champion {} rating {:.1}, pool {}, exploits {}, taus [{taus}]",
            report.round,
            report.champion,
            pop.elo.ratings[report.champion],
            report.pool_size,
            report.exploits.len()
        );
    }

    let champion = select_champion(&pop);
    let agent = &pop.agents[champion];
    Checkpoint::from_agent(agent, false).save(&dir.path("champion.ckpt"))?;
    let mut rng = seeded_rng(cfg.rpbt.seed, STREAM_CHAMPION);
    let rec = play_match(&mut make_game(), &agent.as_opponent(), &Opponent::Uniform, cfg.rpbt.champion_games, &mut rng)?;
    let record = ChampionRecord {
        agent: champion,
        tau: agent.tau(),
        rating: pop.elo.ratings[champion],
        games: rec.games(),
        wins: rec.wins,
        draws: rec.draws,
        losses: rec.losses,
        win_rate: rec.win_rate(),
    };
    write_atomic(&dir.path("champion.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    println!(
        "champion agent {} (tau {:.3}, rating {:.1}) vs uniform: {} wins, {} draws, {} losses",
        record.agent, record.tau, record.rating, record.wins, record.draws, record.losses
    );
    Ok(())
}

/// Writes everything describing the population after `pop.round`, the
/// round-state file last. `ratings` are the post-evaluation ratings; empty
/// for the initial population.
fn persist_round(dir: &RunDir, pop: &PopulationState, ratings: &[f64], first_new: usize) -> anyhow::Result<()> {
    let mut manifest = append_lines(&dir.path("pool/manifest.jsonl"))?;
    for entry in &pop.pool.entries()[first_new..] {
        let file = format!("{:06}.ckpt", entry.id);
        Checkpoint::policy_only(entry.net.clone(), (*entry.params).clone(), entry.tau).save(&dir.path("pool").join(&file))?;
        let rec = PoolRecord {
            id: entry.id,
            agent: entry.agent,
            round: entry.round,
            tau: entry.tau,
            fingerprint: entry.fingerprint.clone(),
            file,
        };
        writeln!(manifest, "{}", json_line(&rec))?;
    }
    let ratings = if ratings.is_empty() { &pop.elo.ratings[..] } else { ratings };
    let elo = EloRecord {
        round: pop.round,
        ratings,
        champion: select_champion(pop),
    };
    writeln!(append_lines(&dir.path("elo_history.jsonl"))?, "{}", json_line(&elo))?;
    let row = std::iter::once(pop.round.to_string())
        .chain(pop.agents.iter().map(|a| format!("{}", a.tau())))
        .collect::<Vec<_>>();
    writeln!(append_lines(&dir.path("tau_history.csv"))?, "{}", row.join(","))?;
    for (i, a) in pop.agents.iter().enumerate() {
        Checkpoint::from_agent(a, true).save(&dir.path("checkpoints").join(format!("agent{i}.ckpt")))?;
    }
    let state = RunState {
        round: pop.round,
        elo: pop.elo.clone(),
    };
    write_atomic(&dir.path("state.json"), serde_json::to_string_pretty(&state)?.as_bytes())
}

/// Rebuilds the population from the run directory, discarding any rows
/// written after the last completed round.
fn restore(dir: &RunDir, cfg: &ExperimentConfig) -> anyhow::Result<PopulationState> {
    let state: RunState = serde_json::from_str(&std::fs::read_to_string(dir.path("state.json"))?).context("state.json")?;
    let n = cfg.rpbt.initial_taus.len();
    if state.elo.ratings.len() != n {
        bail!("state.json has {} ratings for {n} agents", state.elo.ratings.len());
    }
    let round = state.round as u64;
    let pool_len = n * (state.round + 1);
    for f in ["metrics.jsonl", "elo_history.jsonl", "exploits.jsonl"] {
        retain_lines(&dir.path(f), |_, l| Ok(json_u64(l, "round")? <= round))?;
    }
    retain_lines(&dir.path("tau_history.csv"), |i, l| {
        Ok(i == 0 || l.split(',').next().and_then(|r| r.parse::<u64>().ok()).is_some_and(|r| r <= round))
    })?;
    retain_lines(&dir.path("pool/manifest.jsonl"), |_, l| Ok((json_u64(l, "id")? as usize) < pool_len))?;

    let mut pool = PolicyPool::default();
    let manifest = std::fs::read_to_string(dir.path("pool/manifest.jsonl"))?;
    for line in manifest.lines() {
        let rec: PoolRecord = serde_json::from_str(line)?;
        let snapshot = load(&dir.path("pool").join(&rec.file))?;
        let id = pool.push_snapshot(rec.agent, rec.round, snapshot.tau, snapshot.policy, snapshot.policy_params);
        let entry = pool.get(id).expect("just pushed");
        if id != rec.id || entry.fingerprint != rec.fingerprint {
            bail!("pool snapshot {} does not match its manifest record", rec.file);
        }
    }
    if pool.len() != pool_len {
        bail!("pool manifest lists {} snapshots, expected {pool_len}", pool.len());
    }
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let ck = load(&dir.path("checkpoints").join(format!("agent{i}.ckpt")))?;
        let tau = ck.tau;
        agents.push(ck.into_agent(cfg.rpbt.rppo.to_core(tau)?)?);
    }
    eprintln!("resuming after round {}", state.round);
    Ok(PopulationState {
        agents,
        elo: state.elo,
        pool,
        round: state.round,
        config: cfg.rpbt.population(),
        seed: cfg.rpbt.seed,
    })
}

fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

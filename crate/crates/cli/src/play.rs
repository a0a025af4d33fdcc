//! `tournament` and `eval`: games between saved policies on the duel game.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rpbt_core::checkpoint::Checkpoint;
use rpbt_core::envs::GridDuel;
use rpbt_core::model::{ActionSpace, MarkovGame};
use rpbt_core::neural::PolicyHead;
use rpbt_core::rppo::{play_match, MatchRecord, Opponent};
use rpbt_core::seeded_rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::rundir::write_atomic;
use crate::{EvalArgs, Failure, TournamentArgs};

fn game(cfg: &ExperimentConfig) -> Result<GridDuel, Failure> {
    cfg.validate().map_err(Failure::config)?;
    GridDuel::new(cfg.duel.to_core()).map_err(Failure::config)
}

/// Loads a checkpoint and checks that it fits the game.
fn load_player(path: &Path, game: &GridDuel) -> Result<Opponent, Failure> {
    let ck = Checkpoint::load(path).map_err(Failure::runtime)?;
    let n = match game.action_space() {
        ActionSpace::Discrete(n) => n,
        ActionSpace::Continuous { .. } => unreachable!("the duel has discrete actions"),
    };
    if ck.policy.mlp.input_dim != game.observation_dim() || ck.policy.head != (PolicyHead::Categorical { n }) {
        return Err(Failure::runtime(anyhow!(
            "{}: policy does not fit the duel game (needs {} inputs and {n} actions)",
            path.display(),
            game.observation_dim()
        )));
    }
    Ok(ck.opponent())
}

/// Score of the first player: wins count 1, draws 1/2.
fn score(r: &MatchRecord) -> f64 {
    (r.wins as f64 + 0.5 * r.draws as f64) / r.games().max(1) as f64
}

#[derive(Debug, Serialize)]
struct EvalRecord {
    a: PathBuf,
    b: PathBuf,
    games: usize,
    wins: usize,
    draws: usize,
    losses: usize,
    win_rate: f64,
    score: f64,
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let cfg = args.config.load()?;
    let mut game = game(&cfg)?;
    if args.games == 0 {
        return Err(Failure::config(anyhow!("--games must be at least 1")));
    }
    let a = load_player(&args.checkpoint_a, &game)?;
    let b = load_player(&args.checkpoint_b, &game)?;
    let mut rng = seeded_rng(args.seed, 0);
    let rec = play_match(&mut game, &a, &b, args.games, &mut rng).map_err(Failure::runtime)?;
    let out = EvalRecord {
        a: args.checkpoint_a,
        b: args.checkpoint_b,
        games: rec.games(),
        wins: rec.wins,
        draws: rec.draws,
        losses: rec.losses,
        win_rate: rec.win_rate(),
        score: score(&rec),
    };
    println!("{}", serde_json::to_string(&out).map_err(Failure::runtime)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct TournamentRecord {
    checkpoints: Vec<PathBuf>,
    games: usize,
    /// `win_rate[a][b]`: share of games between `a` and `b` won by `a`.
    win_rate: Vec<Vec<Option<f64>>>,
    draw_rate: Vec<Vec<Option<f64>>>,
}

pub fn tournament(args: TournamentArgs) -> Result<(), Failure> {
    let cfg = args.config.load()?;
    let mut game = game(&cfg)?;
    if args.games == 0 {
        return Err(Failure::config(anyhow!("--games must be at least 1")));
    }
    let players = args.checkpoints.iter().map(|p| load_player(p, &game)).collect::<Result<Vec<_>, _>>()?;
    let n = players.len();
    let mut win_rate = vec![vec![None; n]; n];
    let mut draw_rate = vec![vec![None; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let mut rng = seeded_rng(args.seed, (a * n + b) as u64);
            let rec = play_match(&mut game, &players[a], &players[b], args.games, &mut rng).map_err(Failure::runtime)?;
            let g = rec.games() as f64;
            win_rate[a][b] = Some(rec.wins as f64 / g);
            win_rate[b][a] = Some(rec.losses as f64 / g);
            draw_rate[a][b] = Some(rec.draws as f64 / g);
            draw_rate[b][a] = Some(rec.draws as f64 / g);
        }
    }
    println!("win rate of row against column over {} games", args.games);
    for (a, row) in win_rate.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|x| x.map_or("   -  ".to_string(), |w| format!("{w:6.3}"))).collect();
        println!("{a:>3} {}  {}", cells.join(" "), args.checkpoints[a].display());
    }
    let record = TournamentRecord {
        checkpoints: args.checkpoints,
        games: args.games,
        win_rate,
        draw_rate,
    };
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&record).map_err(Failure::runtime)?;
        write_atomic(out, json.as_bytes())
            .with_context(|| format!("writing {}", out.display()))
            .map_err(Failure::runtime)?;
    }
    Ok(())
}

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::model::{build_conditioning, Model};
use super::scores::ScoreTable;
use super::{mix_seed, GameTask};
use crate::arcade::{expert_mean_return, observe, reset, step, GameSpec, GameState};
use crate::error::Result;
use crate::hyperadapter::AdapterParams;
use crate::numerics::ParamStore;
use crate::policy::{ActMode, Trajectory};

/// Seed of the expert rollouts that fix the default target return.
const EXPERT_SEED: u64 = 0x0e0e_0e0e;

#[derive(Clone, Debug, PartialEq)]
pub struct GameResult {
    pub game_id: String,
    pub target_rtg: f64,
    /// Episode returns grouped by evaluation seed.
    pub returns: Vec<f64>,
}

impl GameResult {
    pub fn mean(&self) -> f64 {
        mean_std(&self.returns).0
    }

    pub fn std(&self) -> f64 {
        mean_std(&self.returns).1
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn target_rtg(spec: &GameSpec, cfg: &RunConfig) -> Result<f64> {
    match cfg.eval.target_rtg {
        Some(t) => Ok(t),
        None => expert_mean_return(spec, cfg.eval.expert_episodes.max(1), EXPERT_SEED),
    }
}

/// One greedy episode; the return-to-go drops by each observed reward.
pub fn run_episode(
    model: &Model,
    store: &ParamStore<f32>,
    spec: &GameSpec,
    adapters: Option<&[AdapterParams<f32>]>,
    target: f64,
    max_steps: usize,
    env_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
    let mut state = reset(spec, &mut rng);
    let obs = |s: &GameState| observe(spec, s).into_iter().map(f32::from).collect::<Vec<f32>>();
    let mut hist = Trajectory {
        game_id: spec.game_id.clone(),
        states: vec![obs(&state)],
        actions: Vec::new(),
        rtgs: vec![target as f32],
        timesteps: vec![0],
    };
    let mut ret = 0.0;
    let mut rtg = target;
    for t in 0..max_steps {
        let a = model.dt.act(store, &hist, adapters, ActMode::Greedy)?;
        let (next, r, done) = step(spec, &state, a, &mut rng)?;
        ret += r as f64;
        rtg -= r as f64;
        hist.actions.push(a);
        if done {
            break;
        }
        state = next;
        hist.states.push(obs(&state));
        hist.rtgs.push(rtg as f32);
        hist.timesteps.push(t + 1);
        // only the context window is ever read
        let keep = model.dt.cfg.context_len;
        if hist.states.len() > 4 * keep {
            let cut = hist.states.len() - keep;
            hist.states.drain(..cut);
            hist.actions.drain(..cut);
            hist.rtgs.drain(..cut);
            hist.timesteps.drain(..cut);
        }
    }
    Ok(ret)
}

/// Scores every game with `episodes` greedy episodes per evaluation seed.
/// Games never update the weights, so unseen games get the same treatment.
pub fn evaluate_games(model: &Model, store: &ParamStore<f32>, games: &[&GameTask], cfg: &RunConfig) -> Result<Vec<GameResult>> {
    let mut prepared = Vec::with_capacity(games.len());
    for g in games {
        let cond = build_conditioning(model.method, &g.spec.game_id, g.embedding.as_ref())?;
        let adapters = model.adapter_params(store, cond.as_ref())?;
        prepared.push((g, adapters, target_rtg(&g.spec, cfg)?));
    }
    let e = &cfg.eval;
    // one worker per (game, seed); results keep that order
    let jobs: Vec<(usize, u64)> = (0..games.len()).flat_map(|g| e.seeds.iter().map(move |&s| (g, s))).collect();
    let outs: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(g, seed)| {
                let (task, adapters, target) = &prepared[g];
                scope.spawn(move || {
                    (0..e.episodes)
                        .map(|ep| {
                            run_episode(model, store, &task.spec, adapters.as_deref(), *target, e.max_steps, mix_seed(seed, ep as u64))
                        })
                        .collect::<Result<Vec<f64>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut results: Vec<GameResult> = prepared
        .iter()
        .map(|(g, _, target)| GameResult { game_id: g.spec.game_id.clone(), target_rtg: *target, returns: Vec::new() })
        .collect();
    for ((g, _), out) in jobs.iter().zip(outs) {
        results[*g].returns.extend(out?);
    }
    Ok(results)
}

/// Raw one-column score table for `model`.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, games: &[&GameTask], cfg: &RunConfig) -> Result<ScoreTable> {
    let mut table = ScoreTable::new(vec![model.method.name().to_string()]);
    for r in evaluate_games(model, store, games, cfg)? {
        table.push_row(r.game_id.clone(), vec![r.mean()], vec![r.std()])?;
    }
    Ok(table)
}

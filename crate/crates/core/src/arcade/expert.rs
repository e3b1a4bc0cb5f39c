//! Scripted policies: a BFS expert, its epsilon-noisy variant and uniform random play.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{observe, reset, step, Action, Cell, GameSpec, GameState, GemColor, ACTIONS};
use crate::error::Result;

const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

/// What the expert is currently working towards; drives guidance text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intent {
    Collect { gem: Cell, color: GemColor },
    Push { crate_cell: Cell, goal: Cell },
    Evade { chaser: Cell },
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    Expert,
    Noisy { epsilon: f64 },
    Random,
}

fn danger(s: &GameState, c: Cell, strict: bool) -> bool {
    match s.chaser {
        Some(ch) => c == ch || (strict && c.manhattan(ch) == 1),
        None => false,
    }
}

fn walkable(spec: &GameSpec, s: &GameState, c: Cell, strict: bool) -> bool {
    spec.in_bounds(c)
        && !s.walls.contains(&c)
        && !s.hazards.contains(&c)
        && s.gem_at(c) != Some(spec.good.other())
        && !danger(s, c, strict)
}

/// Shortest walk to any good gem: (first action, distance, gem cell).
fn plan_collect(spec: &GameSpec, s: &GameState, strict: bool) -> Option<(Action, usize, Cell)> {
    let g = spec.grid;
    let idx = |c: Cell| c.y as usize * g + c.x as usize;
    let mut first: Vec<Option<(Action, usize)>> = vec![None; g * g];
    let mut queue = VecDeque::new();
    first[idx(s.agent)] = Some((Action::Noop, 0));
    queue.push_back(s.agent);
    while let Some(c) = queue.pop_front() {
        let (a0, d) = first[idx(c)].unwrap();
        for a in MOVES {
            let n = c.step(a);
            if !walkable(spec, s, n, strict) || s.crate_cell == Some(n) || first[idx(n)].is_some() {
                continue;
            }
            let a_first = if d == 0 { a } else { a0 };
            first[idx(n)] = Some((a_first, d + 1));
            if s.gem_at(n) == Some(spec.good) {
                return Some((a_first, d + 1, n));
            }
            queue.push_back(n);
        }
    }
    None
}

/// BFS over (agent, crate) positions until the crate sits on the goal.
fn plan_push(spec: &GameSpec, s: &GameState, strict: bool) -> Option<(Action, usize)> {
    let (crate0, goal) = (s.crate_cell?, s.goal?);
    let g = spec.grid;
    let key = |a: Cell, c: Cell| (a.y as usize * g + a.x as usize) * g * g + c.y as usize * g + c.x as usize;
    let mut seen: Vec<Option<(Action, usize)>> = vec![None; g * g * g * g];
    let mut queue = VecDeque::new();
    seen[key(s.agent, crate0)] = Some((Action::Noop, 0));
    queue.push_back((s.agent, crate0));
    while let Some((a_cell, c_cell)) = queue.pop_front() {
        let (a0, d) = seen[key(a_cell, c_cell)].unwrap();
        for a in MOVES {
            let n = a_cell.step(a);
            if !walkable(spec, s, n, strict) {
                continue;
            }
            let mut c_next = c_cell;
            if n == c_cell {
                let beyond = c_cell.step(a);
                if !spec.in_bounds(beyond) || s.blocks_crate(beyond) {
                    continue;
                }
                c_next = beyond;
            }
            if seen[key(n, c_next)].is_some() {
                continue;
            }
            let a_first = if d == 0 { a } else { a0 };
            if c_next == goal {
                return Some((a_first, d + 1));
            }
            seen[key(n, c_next)] = Some((a_first, d + 1));
            queue.push_back((n, c_next));
        }
    }
    None
}

/// Deterministic scripted action and the intent behind it.
pub fn expert_action(spec: &GameSpec, s: &GameState) -> (Action, Intent) {
    for strict in [true, false] {
        let collect = if spec.flags.collect { plan_collect(spec, s, strict) } else { None };
        let push = if spec.flags.push { plan_push(spec, s, strict) } else { None };
        let collect_value = collect.map(|(_, d, _)| spec.rewards.good_gem as f64 / d as f64);
        let push_value = push.map(|(_, d)| spec.rewards.delivered as f64 / d as f64);
        match (collect, push) {
            (Some((a, _, gem)), _) if collect_value >= push_value => {
                return (a, Intent::Collect { gem, color: spec.good });
            }
            (_, Some((a, _))) => {
                let intent = Intent::Push { crate_cell: s.crate_cell.unwrap(), goal: s.goal.unwrap() };
                return (a, intent);
            }
            _ => {}
        }
        if s.chaser.is_none() {
            break;
        }
    }
    evade(spec, s)
}

fn evade(spec: &GameSpec, s: &GameState) -> (Action, Intent) {
    let Some(ch) = s.chaser else {
        return (Action::Noop, Intent::Idle);
    };
    let mut best = (Action::Noop, s.agent.manhattan(ch));
    for a in MOVES {
        let n = s.agent.step(a);
        if walkable(spec, s, n, false) && s.crate_cell != Some(n) && n.manhattan(ch) > best.1 {
            best = (a, n.manhattan(ch));
        }
    }
    (best.0, Intent::Evade { chaser: ch })
}

fn policy_action<R: Rng>(spec: &GameSpec, s: &GameState, policy: Policy, rng: &mut R) -> (usize, Intent) {
    match policy {
        Policy::Expert => {
            let (a, i) = expert_action(spec, s);
            (a.id(), i)
        }
        Policy::Noisy { epsilon } => {
            let (a, i) = expert_action(spec, s);
            if rng.gen_bool(epsilon.clamp(0.0, 1.0)) {
                (rng.gen_range(0..ACTIONS), i)
            } else {
                (a.id(), i)
            }
        }
        Policy::Random => (rng.gen_range(0..ACTIONS), Intent::Idle),
    }
}

/// One full episode; `states[t]` is the state acted on at step `t`.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub states: Vec<GameState>,
    pub observations: Vec<Vec<u8>>,
    pub actions: Vec<usize>,
    pub intents: Vec<Intent>,
    pub rewards: Vec<f32>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }
}

pub fn rollout<R: Rng>(spec: &GameSpec, policy: Policy, rng: &mut R) -> Result<Rollout> {
    let mut s = reset(spec, rng);
    let mut out = Rollout::default();
    loop {
        let (a, intent) = policy_action(spec, &s, policy, rng);
        let (next, r, done) = step(spec, &s, a, rng)?;
        out.observations.push(observe(spec, &s));
        out.states.push(s);
        out.actions.push(a);
        out.intents.push(intent);
        out.rewards.push(r);
        if done {
            return Ok(out);
        }
        s = next;
    }
}

/// Mean episode return of `policy` over `episodes` seeded rollouts.
pub fn policy_mean_return(spec: &GameSpec, policy: Policy, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        total += rollout(spec, policy, &mut rng)?.total_reward();
    }
    Ok(total / episodes.max(1) as f64)
}

pub fn expert_mean_return(spec: &GameSpec, episodes: usize, seed: u64) -> Result<f64> {
    policy_mean_return(spec, Policy::Expert, episodes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arcade::DynamicsFlags;

    fn all_specs() -> Vec<GameSpec> {
        let mut out = Vec::new();
        for bits in 0..8u8 {
            let flags = DynamicsFlags { collect: true, avoid: bits & 1 != 0, chase: bits & 2 != 0, push: bits & 4 != 0 };
            for good in [GemColor::Red, GemColor::Blue] {
                for walls in [0, 4] {
                    out.push(GameSpec::new(flags, good, walls, 7, 64));
                }
            }
        }
        out
    }

    #[test]
    fn expert_solves_every_game_and_beats_random() {
        for spec in all_specs() {
            let expert = expert_mean_return(&spec, 100, 3).unwrap();
            let random = policy_mean_return(&spec, Policy::Random, 100, 3).unwrap();
            assert!(expert > 0.0, "{}: expert {expert}", spec.game_id);
            assert!(expert > random, "{}: expert {expert} random {random}", spec.game_id);
        }
    }

    #[test]
    fn expert_pushes_crate_when_no_gems() {
        let flags = DynamicsFlags { collect: false, avoid: false, chase: false, push: true };
        let spec = GameSpec::new(flags, GemColor::Red, 0, 7, 64);
        let s = GameState {
            agent: Cell::new(1, 3),
            gems: vec![],
            hazards: vec![],
            walls: vec![],
            chaser: None,
            crate_cell: Some(Cell::new(2, 3)),
            goal: Some(Cell::new(4, 3)),
            steps: 0,
            collected: 0,
            done: false,
        };
        let (a, intent) = expert_action(&spec, &s);
        assert_eq!(a, Action::Right);
        assert!(matches!(intent, Intent::Push { .. }));
    }
}

//! Procedural grid games sharing one observation shape and one action space.
//!
//! Every game is a `grid x grid` board with an agent and two gem colours. The
//! reward table decides which colour is worth `+1` and which costs `-1`; that
//! choice is not visible in the observation. Dynamics flags add hazard cells,
//! a chaser that pursues the agent every other turn, and a crate that scores
//! `+2` when pushed onto its goal tile.

mod dataset;
mod expert;
mod split;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

pub use dataset::{gen_offline, Episode, OfflineDataset, PolicyKind, PolicyMix, Transition};
pub use expert::{expert_action, expert_mean_return, policy_mean_return, rollout, Intent, Policy, Rollout};
pub use split::{is_test_region, make_split, split_specs, SplitConfig, TaskSplit, TestTask, TrainTask};

/// Observation planes: agent, red gem, blue gem, hazard, chaser, crate, goal, wall.
pub const CHANNELS: usize = 8;
pub const ACTIONS: usize = 6;
pub const DEFAULT_GRID: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Interact = 4,
    Noop = 5,
}

impl Action {
    pub const ALL: [Action; ACTIONS] =
        [Action::Up, Action::Down, Action::Left, Action::Right, Action::Interact, Action::Noop];

    pub fn from_id(id: usize) -> Option<Action> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Interact => "interact",
            Action::Noop => "noop",
        }
    }

    fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::Up => Some((0, -1)),
            Action::Down => Some((0, 1)),
            Action::Left => Some((-1, 0)),
            Action::Right => Some((1, 0)),
            Action::Interact | Action::Noop => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GemColor {
    Red,
    Blue,
}

impl GemColor {
    pub fn other(self) -> GemColor {
        match self {
            GemColor::Red => GemColor::Blue,
            GemColor::Blue => GemColor::Red,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GemColor::Red => "red",
            GemColor::Blue => "blue",
        }
    }
}

/// Board cell as `(x, y)` with `y` growing downwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Cell {
        Cell { x, y }
    }

    pub fn step(self, a: Action) -> Cell {
        match a.delta() {
            Some((dx, dy)) => Cell::new(self.x + dx, self.y + dy),
            None => self,
        }
    }

    pub fn manhattan(self, o: Cell) -> i32 {
        (self.x - o.x).abs() + (self.y - o.y).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DynamicsFlags {
    pub collect: bool,
    pub avoid: bool,
    pub chase: bool,
    pub push: bool,
}

impl DynamicsFlags {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.collect, "collect"), (self.avoid, "avoid"), (self.chase, "chase"), (self.push, "push")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub good_gem: f32,
    pub bad_gem: f32,
    pub hazard: f32,
    pub caught: f32,
    pub delivered: f32,
}

impl Default for RewardTable {
    fn default() -> Self {
        RewardTable { good_gem: 1.0, bad_gem: -1.0, hazard: -1.0, caught: -1.0, delivered: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub game_id: String,
    pub grid: usize,
    pub flags: DynamicsFlags,
    pub good: GemColor,
    pub gems_per_color: usize,
    pub hazards: usize,
    pub walls: usize,
    /// Good gems to collect before the round ends.
    pub quota: usize,
    pub rewards: RewardTable,
    pub episode_cap: usize,
}

impl GameSpec {
    pub fn new(flags: DynamicsFlags, good: GemColor, walls: usize, grid: usize, episode_cap: usize) -> GameSpec {
        let mut id = format!("{}-{}", flags.label(), good.name());
        if walls > 0 {
            id.push_str(&format!("-w{walls}"));
        }
        GameSpec {
            game_id: id,
            grid,
            flags,
            good,
            gems_per_color: 2,
            hazards: if flags.avoid { 3 } else { 0 },
            walls,
            quota: 6,
            rewards: RewardTable::default(),
            episode_cap,
        }
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [CHANNELS, self.grid, self.grid]
    }

    pub fn obs_len(&self) -> usize {
        CHANNELS * self.grid * self.grid
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.grid && (c.y as usize) < self.grid
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GameState {
    pub agent: Cell,
    pub gems: Vec<(Cell, GemColor)>,
    pub hazards: Vec<Cell>,
    pub walls: Vec<Cell>,
    pub chaser: Option<Cell>,
    pub crate_cell: Option<Cell>,
    pub goal: Option<Cell>,
    pub steps: usize,
    pub collected: usize,
    pub done: bool,
}

impl GameState {
    fn occupied(&self, c: Cell) -> bool {
        self.agent == c
            || self.gems.iter().any(|g| g.0 == c)
            || self.hazards.contains(&c)
            || self.walls.contains(&c)
            || self.chaser == Some(c)
            || self.crate_cell == Some(c)
            || self.goal == Some(c)
    }

    pub fn gem_at(&self, c: Cell) -> Option<GemColor> {
        self.gems.iter().find(|g| g.0 == c).map(|g| g.1)
    }

    pub fn blocks_crate(&self, c: Cell) -> bool {
        self.walls.contains(&c) || self.hazards.contains(&c) || self.gem_at(c).is_some() || self.chaser == Some(c)
    }
}

fn free_cell<R: Rng>(spec: &GameSpec, state: &GameState, rng: &mut R, interior: bool) -> Option<Cell> {
    let lo = if interior { 1 } else { 0 };
    let hi = if interior { spec.grid as i32 - 1 } else { spec.grid as i32 };
    let mut cells: Vec<Cell> = (lo..hi)
        .flat_map(|y| (lo..hi).map(move |x| Cell::new(x, y)))
        .filter(|&c| !state.occupied(c))
        .collect();
    if cells.is_empty() {
        return None;
    }
    cells.shuffle(rng);
    Some(cells[0])
}

/// Fresh episode with entities scattered over free cells.
pub fn reset<R: Rng>(spec: &GameSpec, rng: &mut R) -> GameState {
    let g = spec.grid as i32;
    let mut s = GameState {
        agent: Cell::new(rng.gen_range(0..g), rng.gen_range(0..g)),
        gems: Vec::new(),
        hazards: Vec::new(),
        walls: Vec::new(),
        chaser: None,
        crate_cell: None,
        goal: None,
        steps: 0,
        collected: 0,
        done: false,
    };
    for _ in 0..spec.walls {
        if let Some(c) = free_cell(spec, &s, rng, true) {
            s.walls.push(c);
        }
    }
    for _ in 0..spec.hazards {
        if let Some(c) = free_cell(spec, &s, rng, false) {
            s.hazards.push(c);
        }
    }
    if spec.flags.push {
        s.goal = free_cell(spec, &s, rng, true);
        s.crate_cell = free_cell(spec, &s, rng, true);
    }
    if spec.flags.collect {
        for color in [GemColor::Red, GemColor::Blue] {
            for _ in 0..spec.gems_per_color {
                if let Some(c) = free_cell(spec, &s, rng, false) {
                    s.gems.push((c, color));
                }
            }
        }
    }
    if spec.flags.chase {
        // start the chaser away from the agent
        let far: Vec<Cell> = (0..g)
            .flat_map(|y| (0..g).map(move |x| Cell::new(x, y)))
            .filter(|&c| !s.occupied(c) && c.manhattan(s.agent) >= 4)
            .collect();
        s.chaser = far.get(rng.gen_range(0..far.len().max(1))).copied().or_else(|| free_cell(spec, &s, rng, false));
    }
    s
}

fn check_state(spec: &GameSpec, s: &GameState) -> Result<()> {
    if s.done {
        return Err(contract_err!("step called on a finished episode in `{}`", spec.game_id));
    }
    if !spec.in_bounds(s.agent) || s.walls.contains(&s.agent) {
        return Err(contract_err!("agent at {:?} is not a free in-bounds cell", s.agent));
    }
    let mut all: Vec<Cell> = s.gems.iter().map(|g| g.0).collect();
    all.extend(&s.hazards);
    all.extend(&s.walls);
    all.extend(s.chaser);
    all.extend(s.crate_cell);
    all.extend(s.goal);
    if let Some(c) = all.iter().find(|&&c| !spec.in_bounds(c)) {
        return Err(contract_err!("entity at {c:?} lies outside the board"));
    }
    if s.steps >= spec.episode_cap {
        return Err(contract_err!("step counter {} already at the cap", s.steps));
    }
    Ok(())
}

/// Advances one step. Randomness (respawn positions) comes only from `rng`.
pub fn step<R: Rng>(spec: &GameSpec, state: &GameState, action: usize, rng: &mut R) -> Result<(GameState, f32, bool)> {
    let action = Action::from_id(action).ok_or_else(|| contract_err!("action {action} outside [0, {ACTIONS})"))?;
    check_state(spec, state)?;
    let mut s = state.clone();
    let mut reward = 0.0f32;
    let r = spec.rewards;

    let dest = s.agent.step(action);
    if dest != s.agent && spec.in_bounds(dest) && !s.walls.contains(&dest) {
        if s.crate_cell == Some(dest) {
            let beyond = dest.step(action);
            if spec.in_bounds(beyond) && !s.blocks_crate(beyond) {
                s.crate_cell = Some(beyond);
                s.agent = dest;
            }
        } else {
            s.agent = dest;
        }
    }

    if let Some(color) = s.gem_at(s.agent) {
        s.gems.retain(|g| g.0 != s.agent);
        if color == spec.good {
            reward += r.good_gem;
            s.collected += 1;
        } else {
            reward += r.bad_gem;
        }
        if s.collected < spec.quota {
            if let Some(c) = free_cell(spec, &s, rng, false) {
                s.gems.push((c, color));
            }
        } else {
            s.done = true;
        }
    }
    if spec.flags.avoid && s.hazards.contains(&s.agent) {
        reward += r.hazard;
        s.done = true;
    }
    if let (Some(c), Some(goal)) = (s.crate_cell, s.goal) {
        if c == goal {
            reward += r.delivered;
            s.crate_cell = None;
            s.crate_cell = free_cell(spec, &s, rng, true);
        }
    }
    if let Some(ch) = s.chaser {
        if ch == s.agent {
            reward += r.caught;
            s.done = true;
        } else if s.steps % 2 == 1 && !s.done {
            let next = chaser_move(spec, &s, ch);
            s.chaser = Some(next);
            if next == s.agent {
                reward += r.caught;
                s.done = true;
            }
        }
    }
    s.steps += 1;
    if s.steps >= spec.episode_cap {
        s.done = true;
    }
    let done = s.done;
    Ok((s, reward, done))
}

fn chaser_move(spec: &GameSpec, s: &GameState, ch: Cell) -> Cell {
    let dx = s.agent.x - ch.x;
    let dy = s.agent.y - ch.y;
    let horizontal = Cell::new(ch.x + dx.signum(), ch.y);
    let vertical = Cell::new(ch.x, ch.y + dy.signum());
    let order = if dy.abs() >= dx.abs() { [vertical, horizontal] } else { [horizontal, vertical] };
    for c in order {
        if c != ch && spec.in_bounds(c) && !s.walls.contains(&c) && s.crate_cell != Some(c) && !s.hazards.contains(&c) {
            return c;
        }
    }
    ch
}

/// Channel-major occupancy planes, values 0 or 1.
pub fn observe(spec: &GameSpec, s: &GameState) -> Vec<u8> {
    let g = spec.grid;
    let mut obs = vec![0u8; spec.obs_len()];
    let mut set = |ch: usize, c: Cell| obs[ch * g * g + c.y as usize * g + c.x as usize] = 1;
    set(0, s.agent);
    for &(c, color) in &s.gems {
        set(if color == GemColor::Red { 1 } else { 2 }, c);
    }
    for &c in &s.hazards {
        set(3, c);
    }
    if let Some(c) = s.chaser {
        set(4, c);
    }
    if let Some(c) = s.crate_cell {
        set(5, c);
    }
    if let Some(c) = s.goal {
        set(6, c);
    }
    for &c in &s.walls {
        set(7, c);
    }
    obs
}

//! Template-driven instruction sets rolled out by the scripted expert.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Frame, GuidanceStep, Instruction, InstructionSet, KeyElementBox};
use crate::arcade::{rollout, Action, Cell, GameSpec, GameState, Intent, Policy};
use crate::error::{config_err, Error, Result};

const MAX_ATTEMPTS: usize = 50;

/// Per-game description with the entity names slotted in.
pub fn describe_game(spec: &GameSpec) -> String {
    let good = spec.good.name();
    let bad = spec.good.other().name();
    let g = spec.grid;
    let mut text = format!(
        "{} gem hunt. Guide the agent across the {g} by {g} board and pick up {good} gems. \
         Each {good} gem is worth one point and each {bad} gem costs one point.",
        capitalize(good)
    );
    if spec.flags.avoid {
        text.push_str(" Stepping on a hazard tile costs one point and ends the round.");
    }
    if spec.flags.chase {
        text.push_str(" A chaser moves toward the agent every other turn; getting caught costs one point and ends the round.");
    }
    if spec.flags.push {
        text.push_str(" Pushing the crate onto the goal tile scores two points.");
    }
    if spec.walls > 0 {
        text.push_str(" Walls block movement.");
    }
    text.push_str(&format!(" The round ends after {} {good} gems or {} turns.", spec.quota, spec.episode_cap));
    text
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn cell_box(c: Cell, label: &str) -> KeyElementBox {
    KeyElementBox { a: c.x as u32, b: c.y as u32, c: c.x as u32, d: c.y as u32, label: label.into() }
}

fn at(c: Cell) -> String {
    format!("column {} row {}", c.x, c.y)
}

fn guidance(state: &GameState, action: usize, intent: Intent) -> GuidanceStep {
    let act = Action::from_id(action).unwrap_or(Action::Noop);
    let verb = match act {
        Action::Noop | Action::Interact => "wait".to_string(),
        a => format!("move {}", a.name()),
    };
    let mut boxes = vec![cell_box(state.agent, "agent")];
    let text = match intent {
        Intent::Collect { gem, color } => {
            boxes.push(cell_box(gem, &format!("{} gem", color.name())));
            format!("{verb} toward the {} gem at {}", color.name(), at(gem))
        }
        Intent::Push { crate_cell, goal } => {
            boxes.push(cell_box(crate_cell, "crate"));
            boxes.push(cell_box(goal, "goal"));
            format!("{verb} to push the crate at {} toward the goal at {}", at(crate_cell), at(goal))
        }
        Intent::Evade { chaser } => {
            boxes.push(cell_box(chaser, "chaser"));
            format!("{verb} to stay clear of the chaser at {}", at(chaser))
        }
        Intent::Idle => format!("{verb} from {}", at(state.agent)),
    };
    GuidanceStep { action_id: action, text, boxes }
}

/// `n` instructions, each an `m`-step window of a fresh expert episode.
pub fn synth_instructions(spec: &GameSpec, n: usize, m: usize, seed: u64) -> Result<InstructionSet> {
    if n == 0 || m == 0 {
        return Err(config_err!("instruction count and segment length must be at least 1 (got n={n}, m={m})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let description = describe_game(spec);
    let shape = spec.obs_shape();
    let mut instructions = Vec::with_capacity(n);
    for _ in 0..n {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let ro = rollout(spec, Policy::Expert, &mut rng)?;
            if ro.len() >= m {
                found = Some(ro);
                break;
            }
        }
        let ro = found.ok_or_else(|| {
            Error::Generation(format!("expert cannot produce {m} consecutive steps in game `{}`", spec.game_id))
        })?;
        let start = rng.gen_range(0..=ro.len() - m);
        let frames = (start..start + m)
            .map(|t| {
                let planes: Vec<f32> = ro.observations[t].iter().map(|&v| v as f32).collect();
                Frame::from_planes(&planes, shape)
            })
            .collect();
        let guidance = (start..start + m).map(|t| guidance(&ro.states[t], ro.actions[t], ro.intents[t])).collect();
        instructions.push(Instruction { description: description.clone(), frames, guidance });
    }
    Ok(InstructionSet { game_id: spec.game_id.clone(), instructions })
}

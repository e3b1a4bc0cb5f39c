//! Train/test task splits drawn from disjoint regions of the game space.
//!
//! Training games never combine the chaser with the crate; unseen games always
//! do. Training games come in colour pairs sharing one layout family, so the
//! observation alone never tells which gem colour pays.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{gen_offline, OfflineDataset, PolicyMix};
use super::{DynamicsFlags, GameSpec, GemColor, DEFAULT_GRID};
use crate::error::{config_err, Result};
use crate::mgi::{synth_instructions, InstructionSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub budget: usize,
    pub mix: PolicyMix,
    pub n_instructions: usize,
    pub segment_len: usize,
    pub grid: usize,
    pub episode_cap: usize,
    pub master_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_train: 6,
            n_test: 2,
            budget: 10_000,
            mix: PolicyMix::default(),
            n_instructions: 50,
            segment_len: 20,
            grid: DEFAULT_GRID,
            episode_cap: 64,
            master_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTask {
    pub spec: GameSpec,
    pub dataset: OfflineDataset,
    pub instructions: InstructionSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestTask {
    pub spec: GameSpec,
    pub instructions: InstructionSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<TrainTask>,
    pub test: Vec<TestTask>,
}

pub const GAMES_FILE: &str = "games.json";

#[derive(Serialize, Deserialize)]
struct GameList {
    train: Vec<GameSpec>,
    test: Vec<GameSpec>,
}

fn dataset_path(id: &str) -> PathBuf {
    Path::new("datasets").join(format!("{id}.dtgt"))
}

fn instructions_path(id: &str) -> PathBuf {
    Path::new("instructions").join(format!("{id}.json"))
}

impl TaskSplit {
    pub fn specs(&self) -> impl Iterator<Item = &GameSpec> {
        self.train.iter().map(|t| &t.spec).chain(self.test.iter().map(|t| &t.spec))
    }

    /// Writes the game list, one dataset per training game and one
    /// instruction file per game; returns the written paths relative to `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir.join("datasets"))?;
        std::fs::create_dir_all(dir.join("instructions"))?;
        let list = GameList {
            train: self.train.iter().map(|t| t.spec.clone()).collect(),
            test: self.test.iter().map(|t| t.spec.clone()).collect(),
        };
        std::fs::write(dir.join(GAMES_FILE), serde_json::to_string_pretty(&list)?)?;
        let mut out = vec![PathBuf::from(GAMES_FILE)];
        for t in &self.train {
            let p = dataset_path(&t.spec.game_id);
            t.dataset.write(&dir.join(&p))?;
            out.push(p);
        }
        let sets = self.train.iter().map(|t| &t.instructions).chain(self.test.iter().map(|t| &t.instructions));
        for set in sets {
            let p = instructions_path(&set.game_id);
            set.write(&dir.join(&p))?;
            out.push(p);
        }
        Ok(out)
    }

    /// Reads a split written by [`TaskSplit::write_dir`]. A missing
    /// instruction file leaves that game's set empty; conditioned methods
    /// reject it later.
    pub fn read_dir(dir: &Path) -> Result<TaskSplit> {
        let games = dir.join(GAMES_FILE);
        if !games.exists() {
            return Err(config_err!("no {GAMES_FILE} in {}; run gen-data first", dir.display()));
        }
        let list: GameList = serde_json::from_str(&std::fs::read_to_string(&games)?)?;
        let instructions = |spec: &GameSpec| -> Result<InstructionSet> {
            let p = dir.join(instructions_path(&spec.game_id));
            if p.exists() {
                InstructionSet::read(&p)
            } else {
                Ok(InstructionSet { game_id: spec.game_id.clone(), instructions: Vec::new() })
            }
        };
        let mut train = Vec::new();
        for spec in list.train {
            let p = dir.join(dataset_path(&spec.game_id));
            if !p.exists() {
                return Err(config_err!("dataset for `{}` missing at {}", spec.game_id, p.display()));
            }
            let dataset = OfflineDataset::read(&p)?;
            let instructions = instructions(&spec)?;
            train.push(TrainTask { spec, dataset, instructions });
        }
        let test = list
            .test
            .into_iter()
            .map(|spec| Ok(TestTask { instructions: instructions(&spec)?, spec }))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskSplit { train, test })
    }
}

/// Layout families: (avoid, chase, push, walls) with collecting always on.
fn families() -> Vec<(DynamicsFlags, usize)> {
    let mut out = Vec::new();
    for avoid in [false, true] {
        for chase in [false, true] {
            for push in [false, true] {
                for walls in [0, 4] {
                    out.push((DynamicsFlags { collect: true, avoid, chase, push }, walls));
                }
            }
        }
    }
    out
}

pub fn is_test_region(flags: &DynamicsFlags) -> bool {
    flags.chase && flags.push
}

/// Game specs only; cheap and used by the full split as well as by tests.
pub fn split_specs(cfg: &SplitConfig) -> Result<(Vec<GameSpec>, Vec<GameSpec>)> {
    if cfg.n_train == 0 {
        return Err(config_err!("n_train must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let (mut test_fams, mut train_fams): (Vec<_>, Vec<_>) = families().into_iter().partition(|f| is_test_region(&f.0));
    train_fams.shuffle(&mut rng);
    test_fams.shuffle(&mut rng);
    let colors = [GemColor::Red, GemColor::Blue];
    let mut pick = |fams: &[(DynamicsFlags, usize)], n: usize, region: &str| -> Result<Vec<GameSpec>> {
        if n > fams.len() * 2 {
            return Err(config_err!("{region} region holds {} games, {n} requested", fams.len() * 2));
        }
        let first = *colors.choose(&mut rng).unwrap();
        Ok((0..n)
            .map(|i| {
                let (flags, walls) = fams[i / 2];
                let color = if i % 2 == 0 { first } else { first.other() };
                GameSpec::new(flags, color, walls, cfg.grid, cfg.episode_cap)
            })
            .collect())
    };
    let train = pick(&train_fams, cfg.n_train, "training")?;
    // one layout family per unseen game, colours alternating
    if cfg.n_test > test_fams.len() {
        return Err(config_err!("unseen region holds {} layouts, {} requested", test_fams.len(), cfg.n_test));
    }
    let test = (0..cfg.n_test)
        .map(|i| {
            let (flags, walls) = test_fams[i];
            let color = if i % 2 == 0 { GemColor::Red } else { GemColor::Blue };
            GameSpec::new(flags, color, walls, cfg.grid, cfg.episode_cap)
        })
        .collect();
    Ok((train, test))
}

/// Full split: specs, offline data for training games, instruction sets for all.
pub fn make_split(cfg: &SplitConfig) -> Result<TaskSplit> {
    let (train_specs, test_specs) = split_specs(cfg)?;
    let mut train = Vec::new();
    for (i, spec) in train_specs.into_iter().enumerate() {
        let seed = cfg.master_seed ^ i as u64;
        let dataset = gen_offline(&spec, cfg.budget, &cfg.mix, seed)?;
        let instructions = synth_instructions(&spec, cfg.n_instructions, cfg.segment_len, seed)?;
        train.push(TrainTask { spec, dataset, instructions });
    }
    let mut test = Vec::new();
    for (j, spec) in test_specs.into_iter().enumerate() {
        let seed = cfg.master_seed ^ (cfg.n_train + j) as u64;
        let instructions = synth_instructions(&spec, cfg.n_instructions, cfg.segment_len, seed)?;
        test.push(TestTask { spec, instructions });
    }
    Ok(TaskSplit { train, test })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn regions_are_disjoint() {
        let cfg = SplitConfig::default();
        let (train, test) = split_specs(&cfg).unwrap();
        assert_eq!((train.len(), test.len()), (6, 2));
        let train_ids: HashSet<_> = train.iter().map(|s| &s.game_id).collect();
        assert!(test.iter().all(|s| !train_ids.contains(&s.game_id)));
        let train_flags: HashSet<_> = train.iter().map(|s| s.flags).collect();
        assert!(test.iter().all(|s| !train_flags.contains(&s.flags)));
        for c in [GemColor::Red, GemColor::Blue] {
            assert!(train.iter().any(|s| s.good == c));
            assert!(test.iter().any(|s| s.good == c));
        }
    }

    #[test]
    fn exhausted_space_is_config_error() {
        let cfg = SplitConfig { n_train: 40, ..SplitConfig::default() };
        assert!(matches!(split_specs(&cfg), Err(crate::Error::Config(_))));
        let cfg = SplitConfig { n_test: 5, ..SplitConfig::default() };
        assert!(split_specs(&cfg).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let cfg = SplitConfig { budget: 300, n_instructions: 2, segment_len: 4, ..SplitConfig::default() };
        let split = make_split(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = split.write_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 1 + 6 + 8);
        assert_eq!(TaskSplit::read_dir(dir.path()).unwrap(), split);

        let gone = dir.path().join(&files[7]);
        std::fs::remove_file(&gone).unwrap();
        let partial = TaskSplit::read_dir(dir.path()).unwrap();
        assert!(partial.train[0].instructions.is_empty());
        std::fs::remove_file(dir.path().join(&files[1])).unwrap();
        assert!(matches!(TaskSplit::read_dir(dir.path()), Err(crate::Error::Config(_))));
    }
}

//! Training, evaluation and score reporting for the five conditioning methods.

mod checks;
mod config;
mod eval;
mod model;
pub mod oracle;
mod scores;
mod train;

use std::path::Path;

pub use checks::{full_chain_check, grad_suite, overfit_check, GradCase, OverfitReport, GRAD_H, GRAD_TOL};
pub use config::{parse_methods, EmbeddingConfig, EvalConfig, Method, ModelConfig, RunConfig, TrainConfig};
pub use eval::{evaluate, evaluate_games, mean_std, run_episode, target_rtg, GameResult};
pub use model::{build_conditioning, GameConditioning, Model, ParamReport};
pub use scores::{normalize_row, normalize_scores, report_csv, summary_text, ReportSection, ScoreTable};
pub use train::{
    load_model, round_robin, train, EpochSummary, LogRow, TrainLog, TrainOptions, TrainOutcome, LOG_FILE, MODEL_FILE,
    RESUME_FILE,
};

use crate::arcade::{GameSpec, OfflineDataset, TaskSplit};
use crate::error::{config_err, Result};
use crate::mgi::{embed_set, EmbeddingCache, EmbeddingProvider, InstructionSet, SetEmbedding, SyntheticProvider};
use crate::numerics::Checkpoint;
use crate::policy::{compute_rtg, Trajectory};

/// SplitMix64 finaliser over two words; derives independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A game ready for training or evaluation. Unseen games carry no trajectories.
#[derive(Clone, Debug)]
pub struct GameTask {
    pub spec: GameSpec,
    pub trajectories: Vec<Trajectory>,
    pub embedding: Option<SetEmbedding>,
}

#[derive(Clone, Debug)]
pub struct BenchData {
    pub obs_len: usize,
    pub train: Vec<GameTask>,
    pub test: Vec<GameTask>,
}

impl BenchData {
    /// Hashes of every frozen instruction embedding, in game order.
    pub fn embedding_hashes(&self) -> Vec<String> {
        self.train.iter().chain(&self.test).filter_map(|g| g.embedding.as_ref().map(SetEmbedding::hash)).collect()
    }
}

/// Episodes as DT trajectories with suffix returns.
pub fn trajectories(ds: &OfflineDataset, gamma: f64) -> Result<Vec<Trajectory>> {
    ds.episodes
        .iter()
        .filter(|e| !e.is_empty())
        .map(|e| {
            let rewards: Vec<f64> = e.steps.iter().map(|s| s.reward as f64).collect();
            let rtgs = compute_rtg(&rewards, gamma)?;
            Ok(Trajectory {
                game_id: ds.game_id.clone(),
                states: e.steps.iter().map(|s| s.obs.iter().map(|&v| f32::from(v)).collect()).collect(),
                actions: e.steps.iter().map(|s| s.action as usize).collect(),
                rtgs: rtgs.into_iter().map(|r| r as f32).collect(),
                timesteps: (0..e.len()).collect(),
            })
        })
        .collect()
}

pub fn default_provider(cfg: &RunConfig, obs_len: usize) -> Result<SyntheticProvider> {
    SyntheticProvider::new(cfg.embedding.dim, obs_len, cfg.embedding.seed)
}

/// Every provider output the split's instruction sets need, keyed for
/// [`crate::mgi::FileProvider`].
pub fn embedding_cache(split: &TaskSplit, provider: &dyn EmbeddingProvider) -> Result<Checkpoint> {
    let mut cache = EmbeddingCache::default();
    for set in split.train.iter().map(|t| &t.instructions).chain(split.test.iter().map(|t| &t.instructions)) {
        cache.add_set(set, provider)?;
    }
    Ok(cache.into_checkpoint())
}

/// Builds trajectories and instruction embeddings for a split.
pub fn prepare(split: &TaskSplit, cfg: &RunConfig, provider: &dyn EmbeddingProvider) -> Result<BenchData> {
    let obs_len = split
        .specs()
        .next()
        .map(GameSpec::obs_len)
        .ok_or_else(|| config_err!("split has no games"))?;
    let embed = |set: &InstructionSet| -> Result<Option<SetEmbedding>> {
        if set.is_empty() {
            Ok(None)
        } else {
            embed_set(set, provider).map(Some)
        }
    };
    let train = split
        .train
        .iter()
        .map(|t| {
            Ok(GameTask {
                spec: t.spec.clone(),
                trajectories: trajectories(&t.dataset, cfg.train.gamma)?,
                embedding: embed(&t.instructions)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = split
        .test
        .iter()
        .map(|t| Ok(GameTask { spec: t.spec.clone(), trajectories: Vec::new(), embedding: embed(&t.instructions)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchData { obs_len, train, test })
}

/// Generates the configured split in memory and embeds its instructions.
pub fn build_data(cfg: &RunConfig) -> Result<BenchData> {
    let split = crate::arcade::make_split(&cfg.split)?;
    let obs_len = split.specs().next().map(GameSpec::obs_len).ok_or_else(|| config_err!("split has no games"))?;
    prepare(&split, cfg, &default_provider(cfg, obs_len)?)
}

/// One trained and evaluated (method, seed) pair.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub params: ParamReport,
    pub log: TrainLog,
    pub id: Vec<GameResult>,
    pub ood: Vec<GameResult>,
}

#[derive(Clone, Debug, Default)]
pub struct Experiment {
    pub records: Vec<RunRecord>,
}

impl Experiment {
    fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.method) {
                out.push(r.method);
            }
        }
        out
    }

    /// Episode returns pooled over training seeds, one section per split.
    pub fn sections(&self) -> Result<Vec<ReportSection>> {
        let mut out = Vec::new();
        for (split, pick) in [("ID", true), ("OOD", false)] {
            let mut table = ScoreTable::new(Vec::new());
            for m in self.methods() {
                let runs: Vec<&Vec<GameResult>> =
                    self.records.iter().filter(|r| r.method == m).map(|r| if pick { &r.id } else { &r.ood }).collect();
                let mut col = ScoreTable::new(vec![m.name().to_string()]);
                if let Some(first) = runs.first() {
                    for (i, g) in first.iter().enumerate() {
                        let pooled: Vec<f64> = runs.iter().flat_map(|r| r[i].returns.iter().copied()).collect();
                        let (mean, std) = mean_std(&pooled);
                        col.push_row(g.game_id.clone(), vec![mean], vec![std])?;
                    }
                }
                table.join(&col)?;
            }
            out.push(ReportSection::new(split, table));
        }
        Ok(out)
    }
}

/// Directory name of one (method, seed) run.
pub fn run_name(method: Method, seed: u64) -> String {
    format!("{method}-s{seed}")
}

/// Trains and evaluates every configured method for each seed.
pub fn run_experiment(
    data: &BenchData,
    cfg: &RunConfig,
    seeds: &[u64],
    run_root: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<Experiment> {
    let mut exp = Experiment::default();
    let id: Vec<&GameTask> = data.train.iter().collect();
    let ood: Vec<&GameTask> = data.test.iter().collect();
    for &method in &cfg.train.methods {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let started = std::time::Instant::now();
            let mut on_epoch = |s: &EpochSummary| {
                progress(&format!("{method} seed {seed} epoch {} mean loss {:.4}", s.epoch, s.mean_loss));
            };
            let opts = TrainOptions {
                run_dir: run_root.map(|r| r.join(run_name(method, seed))),
                on_epoch: Some(&mut on_epoch),
                ..Default::default()
            };
            let out = train(data, &c, method, opts)?;
            let model = Model::new(&c, method, data.obs_len)?;
            let id_res = evaluate_games(&model, &out.store, &id, &c)?;
            let ood_res = evaluate_games(&model, &out.store, &ood, &c)?;
            progress(&format!("{method} seed {seed} done in {:.0}s", started.elapsed().as_secs_f64()));
            exp.records.push(RunRecord {
                method,
                seed,
                checkpoint_hash: out.checkpoint_hash(),
                params: model.param_report(&out.store),
                log: out.log,
                id: id_res,
                ood: ood_res,
            });
        }
    }
    Ok(exp)
}

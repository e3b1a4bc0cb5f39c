use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arcade::{SplitConfig, ACTIONS};
use crate::conditioning::{ConditioningConfig, Modalities};
use crate::error::{config_err, Error, Result};
use crate::hyperadapter::HyperConfig;
use crate::policy::DTConfig;

/// The five conditioning paths compared by the bench.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "DT")]
    Dt,
    #[serde(rename = "DTL")]
    Dtl,
    #[serde(rename = "DTV")]
    Dtv,
    #[serde(rename = "DTGI-a")]
    DtgiA,
    #[serde(rename = "DTGI")]
    Dtgi,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dt, Method::Dtl, Method::Dtv, Method::DtgiA, Method::Dtgi];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dt => "DT",
            Method::Dtl => "DTL",
            Method::Dtv => "DTV",
            Method::DtgiA => "DTGI-a",
            Method::Dtgi => "DTGI",
        }
    }

    pub fn is_conditioned(self) -> bool {
        self != Method::Dt
    }

    /// Which instruction streams reach the fusion MLP.
    pub fn modalities(self) -> Option<Modalities> {
        match self {
            Method::Dt => None,
            Method::Dtl => Some(Modalities { description: true, frames: false, guidance: false }),
            Method::Dtv => Some(Modalities { description: false, frames: true, guidance: false }),
            Method::DtgiA | Method::Dtgi => Some(Modalities::ALL),
        }
    }

    /// DTL and DTV condition on a single pseudo-instruction.
    pub fn single_instruction(self) -> bool {
        matches!(self, Method::Dtl | Method::Dtv)
    }

    pub fn learned_importance(self) -> bool {
        self == Method::Dtgi
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| config_err!("unknown method `{s}` (expected one of DT, DTL, DTV, DTGI-a, DTGI)"))
    }
}

/// Parses `DT,DTGI`.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let out = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(config_err!("no methods given"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_hidden: usize,
    pub max_timestep: usize,
    pub dropout: f64,
    pub rtg_scale: f64,
    pub cond_heads: usize,
    pub cond_ffn_hidden: usize,
    pub positional: bool,
    pub hyper_bottleneck: usize,
    pub adapter_bottleneck: usize,
    pub per_layer_adapters: bool,
    pub layer_embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub methods: Vec<Method>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_tokens: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Windows drawn per epoch; 0 means one window per `context_len` transitions.
    pub windows_per_epoch: usize,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Initial return-to-go; unset means each game's scripted-expert mean return.
    pub target_rtg: Option<f64>,
    pub max_steps: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub expert_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub split: SplitConfig,
    pub embedding: EmbeddingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            split: SplitConfig::default(),
            embedding: EmbeddingConfig { dim: 512, seed: 0 },
            model: ModelConfig {
                context_len: 20,
                layers: 6,
                heads: 8,
                embed_dim: 128,
                ffn_hidden: 512,
                max_timestep: 256,
                dropout: 0.1,
                rtg_scale: 10.0,
                cond_heads: 2,
                cond_ffn_hidden: 512,
                positional: true,
                hyper_bottleneck: 64,
                adapter_bottleneck: 32,
                per_layer_adapters: false,
                layer_embed_dim: 32,
            },
            train: TrainConfig {
                methods: Method::ALL.to_vec(),
                lr: 6e-4,
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.1,
                grad_clip: 1.0,
                warmup_tokens: 512 * 20,
                max_epochs: 30,
                batch_size: 200,
                windows_per_epoch: 0,
                gamma: 1.0,
                seed: 0,
            },
            eval: EvalConfig { target_rtg: None, max_steps: 5120, episodes: 3, seeds: vec![0, 1, 2], expert_episodes: 50 },
        }
    }
}

impl RunConfig {
    /// Reduced widths that train the default split on one CPU core in minutes.
    pub fn desk() -> RunConfig {
        let mut c = RunConfig::default();
        c.split.n_instructions = 10;
        c.embedding.dim = 64;
        c.model.layers = 3;
        c.model.heads = 4;
        c.model.embed_dim = 64;
        c.model.ffn_hidden = 256;
        c.model.cond_ffn_hidden = 64;
        c.model.hyper_bottleneck = 32;
        c.model.adapter_bottleneck = 16;
        c.train.max_epochs = 10;
        c.train.batch_size = 32;
        // one window per five transitions; a window per transition is out of reach on one core
        c.train.windows_per_epoch = 12_000;
        c
    }

    /// Two-layer model on short windows and three-instruction sets, for
    /// gradient and overfit checks.
    pub fn test_scale() -> RunConfig {
        let mut c = RunConfig::default();
        c.split.budget = 1_000;
        c.split.n_instructions = 3;
        c.split.segment_len = 4;
        c.embedding.dim = 8;
        c.model.context_len = 8;
        c.model.layers = 2;
        c.model.heads = 2;
        c.model.embed_dim = 16;
        c.model.ffn_hidden = 32;
        c.model.max_timestep = 64;
        c.model.dropout = 0.0;
        c.model.cond_ffn_hidden = 8;
        c.model.hyper_bottleneck = 6;
        c.model.adapter_bottleneck = 4;
        c.model.layer_embed_dim = 2;
        c.train.methods = vec![Method::Dtgi];
        c.train.max_epochs = 1;
        c.train.batch_size = 64;
        c
    }

    pub fn dt_config(&self, obs_len: usize) -> DTConfig {
        let m = &self.model;
        DTConfig {
            context_len: m.context_len,
            layers: m.layers,
            heads: m.heads,
            embed_dim: m.embed_dim,
            ffn_hidden: m.ffn_hidden,
            action_space: ACTIONS,
            obs_len,
            max_timestep: m.max_timestep,
            dropout: m.dropout,
            rtg_scale: m.rtg_scale,
        }
    }

    pub fn conditioning_config(&self) -> ConditioningConfig {
        ConditioningConfig {
            embed_dim: self.embedding.dim,
            heads: self.model.cond_heads,
            ffn_hidden: self.model.cond_ffn_hidden,
            segment_len: self.split.segment_len,
            positional: self.model.positional,
        }
    }

    pub fn hyper_config(&self) -> HyperConfig {
        let m = &self.model;
        HyperConfig {
            input_dim: self.embedding.dim,
            hidden: m.hyper_bottleneck,
            bottleneck: m.adapter_bottleneck,
            model_dim: m.embed_dim,
            per_layer: m.per_layer_adapters,
            layers: m.layers,
            layer_embed_dim: m.layer_embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.methods.is_empty() {
            return Err(config_err!("train.methods is empty"));
        }
        if !(t.lr > 0.0) || !(t.grad_clip > 0.0) {
            return Err(config_err!("learning rate and clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(config_err!("betas must lie in [0, 1)"));
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(config_err!("batch size and epoch count must be positive"));
        }
        if !(0.0..=1.0).contains(&t.gamma) {
            return Err(config_err!("gamma {} outside [0, 1]", t.gamma));
        }
        let e = &self.eval;
        if e.episodes == 0 || e.seeds.is_empty() || e.max_steps == 0 {
            return Err(config_err!("evaluation needs episodes, seeds and a positive step limit"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.model.dropout));
        }
        let sp = &self.split;
        if sp.budget == 0 {
            return Err(config_err!("split.budget must be at least 1 transition"));
        }
        if sp.n_train == 0 || sp.n_instructions == 0 || sp.segment_len == 0 {
            return Err(config_err!("split needs at least one training game, instruction and segment step"));
        }
        sp.mix.validate()
    }
}

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use crate::conditioning::{
    importance, importance_tape, uniform_importance, uniform_importance_tape, Conditioner, ImportanceScores,
    InstructionFeature, Modalities,
};
use crate::error::{config_err, Result};
use crate::hyperadapter::{AdapterParams, AdapterVars, HyperAdapter};
use crate::mgi::SetEmbedding;
use crate::numerics::{Init, ParamStore, Scalar, Tape};
use crate::policy::DecisionTransformer;

/// Salt for the conditioning stack's init stream.
const COND_STREAM: u64 = 0x00c0_4d17_10a1_d5ee;

/// What a conditioned method sees of one game's instruction set.
#[derive(Clone, Debug, PartialEq)]
pub struct GameConditioning {
    pub emb: SetEmbedding,
    pub modalities: Modalities,
    pub learned: bool,
}

/// DT gets nothing; DTL and DTV see instruction 0 with two streams zeroed;
/// DTGI-a and DTGI see the whole set.
pub fn build_conditioning(method: Method, game_id: &str, emb: Option<&SetEmbedding>) -> Result<Option<GameConditioning>> {
    let Some(modalities) = method.modalities() else { return Ok(None) };
    let emb = emb.ok_or_else(|| config_err!("method {method} needs the instruction set of `{game_id}`"))?;
    let emb = if method.single_instruction() { emb.select(&[0]) } else { emb.clone() };
    Ok(Some(GameConditioning { emb, modalities, learned: method.learned_importance() }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub method: String,
    pub backbone: usize,
    pub conditioner: usize,
    pub hypernet: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub method: Method,
    pub dt: DecisionTransformer,
    pub cond: Option<(Conditioner, HyperAdapter)>,
}

impl Model {
    pub fn new(cfg: &RunConfig, method: Method, obs_len: usize) -> Result<Model> {
        let dt = DecisionTransformer::new(cfg.dt_config(obs_len))?;
        let cond = if method.is_conditioned() {
            Some((Conditioner::new(cfg.conditioning_config())?, HyperAdapter::new(cfg.hyper_config())?))
        } else {
            None
        };
        Ok(Model { method, dt, cond })
    }

    /// The backbone draws from `seed` alone, so every method starts from the
    /// same DT weights.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.dt.init(&mut store, &mut Init { rng: &mut rng })?;
        if let Some((c, h)) = &self.cond {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ COND_STREAM);
            let mut init = Init { rng: &mut rng };
            c.init(&mut store, &mut init)?;
            h.init(&mut store, &mut init)?;
            h.check_budget(&store)?;
        }
        Ok(store)
    }

    pub fn param_report<T: Scalar>(&self, store: &ParamStore<T>) -> ParamReport {
        let backbone = store.count_with_prefix(&format!("{}.", crate::policy::PREFIX));
        let conditioner = store.count_with_prefix(&format!("{}.", crate::conditioning::PREFIX));
        let hypernet = store.count_with_prefix(&format!("{}.", crate::hyperadapter::PREFIX));
        ParamReport { method: self.method.name().into(), backbone, conditioner, hypernet, total: store.num_values() }
    }

    fn stack(&self) -> Result<&(Conditioner, HyperAdapter)> {
        self.cond.as_ref().ok_or_else(|| config_err!("method {} has no conditioning stack", self.method))
    }

    fn features_and_scores<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        g: &GameConditioning,
    ) -> Result<(crate::numerics::Var, crate::numerics::Var)> {
        let (cond, _) = self.stack()?;
        let c = cond.features(tape, store, &g.emb, g.modalities)?;
        let s = if g.learned { importance_tape(tape, c) } else { uniform_importance_tape(tape, g.emb.n) };
        Ok((c, s))
    }

    /// One adapter per DT layer, built on `tape` so gradients reach the
    /// conditioning stack.
    pub fn adapters_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        g: &GameConditioning,
    ) -> Result<Vec<AdapterVars>> {
        let (c, s) = self.features_and_scores(tape, store, g)?;
        self.stack()?.1.adapters(tape, store, c, s, self.dt.cfg.layers)
    }

    /// Evaluated adapters for inference, `None` for the unconditioned model.
    pub fn adapter_params<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: Option<&GameConditioning>,
    ) -> Result<Option<Vec<AdapterParams<T>>>> {
        let Some(g) = g else { return Ok(None) };
        let mut tape = Tape::new();
        let vars = self.adapters_on_tape(&mut tape, store, g)?;
        Ok(Some(
            vars.iter()
                .map(|v| AdapterParams { d_hat: tape.value(v.d_hat).clone(), u_hat: tape.value(v.u_hat).clone() })
                .collect(),
        ))
    }

    /// Fused instruction features and the importance scores the method uses.
    pub fn instruction_scores<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &GameConditioning,
    ) -> Result<(Vec<InstructionFeature>, ImportanceScores)> {
        let (cond, _) = self.stack()?;
        let feats = cond.instruction_features(store, &g.emb, g.modalities)?;
        let scores = if g.learned { importance(&feats)? } else { uniform_importance(feats.len())? };
        Ok((feats, scores))
    }
}

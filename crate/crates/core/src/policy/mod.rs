//! GPT-style decision transformer over interleaved `(rtg, state, action)` tokens.
//!
//! Each block is pre-norm: `h = x + Attn(LN1 x)` and
//! `y = h + FFN(LN2 h) + Adapter(LN2 h)`, the adapter term present only when
//! the model is conditioned. The residual `h` is kept in the second sum.
//! Action logits are read from the state tokens, so the action at step `t`
//! never sees itself.

use std::ops::Range;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, shape_err, Result};
use crate::hyperadapter::{adapter_forward_tape, AdapterParams, AdapterVars};
use crate::numerics::{argmax, Activation, AttentionBlock, Init, ParamStore, Scalar, Tape, Tensor, Var};

pub const PREFIX: &str = "dt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DTConfig {
    pub context_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_hidden: usize,
    pub action_space: usize,
    pub obs_len: usize,
    pub max_timestep: usize,
    pub dropout: f64,
    /// Return-to-go values are divided by this before embedding.
    pub rtg_scale: f64,
}

impl Default for DTConfig {
    fn default() -> Self {
        DTConfig {
            context_len: 20,
            layers: 6,
            heads: 8,
            embed_dim: 128,
            ffn_hidden: 512,
            action_space: crate::arcade::ACTIONS,
            obs_len: crate::arcade::CHANNELS * crate::arcade::DEFAULT_GRID * crate::arcade::DEFAULT_GRID,
            max_timestep: 256,
            dropout: 0.1,
            rtg_scale: 10.0,
        }
    }
}

/// Suffix sums `rtg[t] = sum_{k >= t} gamma^(k - t) r[k]`, one backward pass.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(config_err!("gamma {gamma} outside [0, 1]"));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Running or recorded trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub game_id: String,
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<usize>,
    pub rtgs: Vec<f32>,
    pub timesteps: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Fixed-length windows, right-padded; `mask` marks real steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub windows: usize,
    pub len: usize,
    pub obs_len: usize,
    pub states: Vec<f32>,
    pub actions: Vec<usize>,
    pub rtgs: Vec<f32>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn new(len: usize, obs_len: usize) -> Batch {
        Batch { windows: 0, len, obs_len, states: vec![], actions: vec![], rtgs: vec![], timesteps: vec![], mask: vec![] }
    }

    /// Appends steps `range` of `traj`, padding to the window length.
    pub fn push(&mut self, traj: &Trajectory, range: Range<usize>) -> Result<()> {
        let n = range.len();
        if n == 0 || n > self.len || range.end > traj.len() {
            return Err(contract_err!("window {range:?} does not fit length {} over {} steps", self.len, traj.len()));
        }
        for t in range {
            if traj.states[t].len() != self.obs_len {
                return Err(shape_err!("state has {} values, expected {}", traj.states[t].len(), self.obs_len));
            }
            self.states.extend_from_slice(&traj.states[t]);
            self.actions.push(traj.actions.get(t).copied().unwrap_or(0));
            self.rtgs.push(traj.rtgs[t]);
            self.timesteps.push(traj.timesteps[t]);
            self.mask.push(true);
        }
        for _ in n..self.len {
            self.states.extend(std::iter::repeat(0.0).take(self.obs_len));
            self.actions.push(0);
            self.rtgs.push(0.0);
            self.timesteps.push(0);
            self.mask.push(false);
        }
        self.windows += 1;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.windows * self.len
    }

    pub fn weights<T: Scalar>(&self) -> Vec<T> {
        self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
    }
}

/// Adapters for a run of consecutive windows, one pair per layer.
#[derive(Clone, Debug)]
pub struct AdapterSegment {
    pub windows: Range<usize>,
    pub layers: Vec<AdapterVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTransformer {
    pub cfg: DTConfig,
    blocks: Vec<AttentionBlock>,
}

impl DecisionTransformer {
    pub fn new(cfg: DTConfig) -> Result<DecisionTransformer> {
        if cfg.context_len == 0 || cfg.layers == 0 || cfg.action_space == 0 || cfg.obs_len == 0 || cfg.max_timestep == 0 {
            return Err(config_err!("decision transformer sizes must be positive: {cfg:?}"));
        }
        if !(cfg.rtg_scale > 0.0) {
            return Err(config_err!("rtg scale must be positive"));
        }
        let blocks = (0..cfg.layers)
            .map(|l| AttentionBlock::new(format!("{PREFIX}.block{l}"), cfg.embed_dim, cfg.heads, cfg.ffn_hidden, true, Activation::Gelu))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecisionTransformer { cfg, blocks })
    }

    fn n(leaf: &str) -> String {
        format!("{PREFIX}.{leaf}")
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, init: &mut Init<R>) -> Result<()> {
        let c = &self.cfg;
        let d = c.embed_dim;
        init.linear(store, &Self::n("state"), c.obs_len, d, 0.02)?;
        init.linear(store, &Self::n("rtg"), 1, d, 0.02)?;
        store.insert(Self::n("action_emb"), init.normal(&[c.action_space, d], 0.02))?;
        store.insert(Self::n("time_emb"), init.normal(&[c.max_timestep, d], 0.02))?;
        for b in &self.blocks {
            b.init(store, init)?;
        }
        init.layer_norm(store, &Self::n("ln_f"), d)?;
        init.linear(store, &Self::n("head"), d, c.action_space, 0.02)
    }

    pub fn param_count(&self) -> usize {
        let c = &self.cfg;
        let d = c.embed_dim;
        (c.obs_len * d + d)
            + 2 * d
            + (c.action_space + c.max_timestep) * d
            + self.blocks.iter().map(AttentionBlock::param_count).sum::<usize>()
            + 2 * d
            + (d * c.action_space + c.action_space)
    }

    fn lin<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, name: &str) -> Var {
        let w = tape.param(store, &Self::n(&format!("{name}.w")));
        let b = tape.param(store, &Self::n(&format!("{name}.b")));
        tape.linear(x, w, b)
    }

    /// Action logits for every step of every window: `(windows * len) x actions`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        adapters: Option<&[AdapterSegment]>,
    ) -> Result<Var> {
        let c = &self.cfg;
        let (w, k) = (batch.windows, batch.len);
        if k > c.context_len {
            return Err(contract_err!("window of {k} steps exceeds the context length {}", c.context_len));
        }
        if w == 0 {
            return Err(contract_err!("empty batch"));
        }
        if batch.obs_len != c.obs_len || batch.states.len() != w * k * c.obs_len {
            return Err(shape_err!("batch states do not match {} x {} x {}", w, k, c.obs_len));
        }
        if let Some(a) = batch.actions.iter().find(|&&a| a >= c.action_space) {
            return Err(contract_err!("action {a} outside [0, {})", c.action_space));
        }
        if let Some(segs) = adapters {
            let mut next = 0;
            for s in segs {
                if s.windows.start != next || s.layers.len() != c.layers {
                    return Err(contract_err!("adapter segments must tile the batch in order with one adapter per layer"));
                }
                next = s.windows.end;
            }
            if next != w {
                return Err(contract_err!("adapter segments cover {next} of {w} windows"));
            }
        }
        let steps = w * k;
        let states = Tensor::new(vec![steps, c.obs_len], batch.states.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        let rtg = Tensor::new(vec![steps, 1], batch.rtgs.iter().map(|&v| T::from_f64(v as f64 / c.rtg_scale)).collect())?;
        let s = tape.constant(states);
        let s = Self::lin(tape, store, s, "state");
        let r = tape.constant(rtg);
        let r = Self::lin(tape, store, r, "rtg");
        let table = tape.param(store, &Self::n("action_emb"));
        let a = tape.gather_rows(table, &batch.actions);
        let times: Vec<usize> = batch.timesteps.iter().map(|&t| t.min(c.max_timestep - 1)).collect();
        let table = tape.param(store, &Self::n("time_emb"));
        let te = tape.gather_rows(table, &times);
        let parts: Vec<Var> = [r, s, a].into_iter().map(|p| tape.add(p, te)).collect();
        let stacked = tape.concat_rows(&parts);
        // interleave to (rtg_t, s_t, a_t) per window
        let order: Vec<usize> = (0..steps).flat_map(|i| [i, steps + i, 2 * steps + i]).collect();
        let mut x = tape.gather_rows(stacked, &order);
        x = tape.dropout(x);
        let tokens = 3 * k;
        for (l, block) in self.blocks.iter().enumerate() {
            x = match adapters {
                None => block.forward(tape, store, x, tokens),
                Some(segs) => {
                    let mut side = |tape: &mut Tape<T>, z: Var| {
                        if segs.len() == 1 {
                            return adapter_forward_tape(tape, z, segs[0].layers[l]);
                        }
                        let outs: Vec<Var> = segs
                            .iter()
                            .map(|sg| {
                                let zs = tape.slice_rows(z, sg.windows.start * tokens, sg.windows.len() * tokens);
                                adapter_forward_tape(tape, zs, sg.layers[l])
                            })
                            .collect();
                        tape.concat_rows(&outs)
                    };
                    block.forward_with(tape, store, x, tokens, Some(&mut side))
                }
            };
        }
        let g = tape.param(store, &Self::n("ln_f.g"));
        let b = tape.param(store, &Self::n("ln_f.b"));
        let x = tape.layer_norm(x, g, b);
        let state_rows: Vec<usize> = (0..steps).map(|i| 3 * i + 1).collect();
        let hs = tape.gather_rows(x, &state_rows);
        Ok(Self::lin(tape, store, hs, "head"))
    }

    /// Masked mean cross-entropy of the batch's actions.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, logits: Var, batch: &Batch) -> Var {
        tape.cross_entropy(logits, &batch.actions, &batch.weights::<T>())
    }

    /// Next action for the last state in `history`, using at most `context_len` steps.
    pub fn act<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        history: &Trajectory,
        adapter: Option<&[AdapterParams<T>]>,
        mode: ActMode,
    ) -> Result<usize> {
        let n = history.len();
        if n == 0 {
            return Err(contract_err!("act needs at least the current state"));
        }
        let start = n.saturating_sub(self.cfg.context_len);
        let mut batch = Batch::new(n - start, self.cfg.obs_len);
        batch.push(history, start..n)?;
        let mut tape = Tape::new();
        let segs = adapter.map(|layers| {
            let vars: Vec<AdapterVars> = layers.iter().map(|p| p.on_tape(&mut tape)).collect();
            vec![AdapterSegment { windows: 0..1, layers: vars }]
        });
        let logits = self.forward(&mut tape, store, &batch, segs.as_deref())?;
        let last: Vec<f64> = tape.value(logits).row(n - start - 1).iter().map(|v| v.as_f64()).collect();
        match mode {
            ActMode::Greedy => Ok(argmax(&last)),
            ActMode::Sample { temperature, seed } => {
                let scaled: Vec<f64> = last.iter().map(|v| v / temperature.max(1e-6)).collect();
                let p = crate::numerics::softmax(&scaled)?;
                let u: f64 = ChaCha8Rng::seed_from_u64(seed ^ n as u64).gen();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return Ok(i);
                    }
                }
                Ok(p.len() - 1)
            }
        }
    }
}

/// Greedy is the evaluation policy; sampling exists for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[cfg(test)]
mod tests;

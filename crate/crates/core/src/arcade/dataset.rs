//! Offline transition datasets and their little-endian file format.
//!
//! Layout: magic `DTGT`, version `u32`, game id (`u16` length + UTF-8), rank `u8`
//! and `u32` extents of the observation, action count `u32`, seed `u64`, policy
//! label (`u16` length + UTF-8), episode count `u32`. Each episode is a `u32`
//! step count followed by records of `obs` bytes (one per cell), action `u8`,
//! reward `f32` and done `u8`. The last record of every episode has done set.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::expert::{rollout, Policy};
use super::{GameSpec, ACTIONS};
use crate::error::{config_err, Error, Result};

const MAGIC: &[u8; 4] = b"DTGT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    Expert,
    Noisy,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMix {
    pub expert: f64,
    pub noisy: f64,
    pub random: f64,
    pub epsilon: f64,
}

impl Default for PolicyMix {
    fn default() -> Self {
        PolicyMix { expert: 0.5, noisy: 0.3, random: 0.2, epsilon: 0.2 }
    }
}

impl PolicyMix {
    pub fn only(kind: PolicyKind) -> PolicyMix {
        let mut m = PolicyMix { expert: 0.0, noisy: 0.0, random: 0.0, epsilon: 0.2 };
        match kind {
            PolicyKind::Expert => m.expert = 1.0,
            PolicyKind::Noisy => m.noisy = 1.0,
            PolicyKind::Random => m.random = 1.0,
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.expert, self.noisy, self.random];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(config_err!("policy weights must be finite and nonnegative, got {w:?}"));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(config_err!("policy mix has zero total weight"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(config_err!("noisy-expert epsilon {} outside [0, 1]", self.epsilon));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("expert:{}/noisy:{}(eps {})/random:{}", self.expert, self.noisy, self.epsilon, self.random)
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Policy {
        let total = self.expert + self.noisy + self.random;
        let u = rng.gen::<f64>() * total;
        if u < self.expert {
            Policy::Expert
        } else if u < self.expert + self.noisy {
            Policy::Noisy { epsilon: self.epsilon }
        } else {
            Policy::Random
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<u8>,
    pub action: u8,
    pub reward: f32,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f32> {
        self.steps.iter().map(|t| t.reward).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub game_id: String,
    pub obs_shape: Vec<usize>,
    pub action_count: usize,
    pub seed: u64,
    pub policy_label: String,
    pub episodes: Vec<Episode>,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }

    pub fn mean_return(&self) -> f64 {
        let total: f64 = self.transitions().map(|t| t.reward as f64).sum();
        total / self.episodes.len().max(1) as f64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.len() * (self.obs_len() + 6));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.game_id);
        out.push(self.obs_shape.len() as u8);
        for &e in &self.obs_shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.action_count as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.policy_label);
        out.extend_from_slice(&(self.episodes.len() as u32).to_le_bytes());
        for ep in &self.episodes {
            out.extend_from_slice(&(ep.len() as u32).to_le_bytes());
            for t in &ep.steps {
                out.extend_from_slice(&t.obs);
                out.push(t.action);
                out.extend_from_slice(&t.reward.to_le_bytes());
                out.push(t.done as u8);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<OfflineDataset> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a trajectory dataset (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let game_id = r.string()?;
        let rank = r.take(1)?[0] as usize;
        let obs_shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let obs_len: usize = obs_shape.iter().product();
        let action_count = r.u32()? as usize;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let policy_label = r.string()?;
        let n_eps = r.u32()? as usize;
        let mut episodes = Vec::with_capacity(n_eps);
        for e in 0..n_eps {
            let n = r.u32()? as usize;
            let mut steps = Vec::with_capacity(n);
            for i in 0..n {
                let obs = r.take(obs_len)?.to_vec();
                let action = r.take(1)?[0];
                let reward = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                let done = r.take(1)?[0] != 0;
                if (action as usize) >= action_count {
                    return Err(Error::Format(format!("episode {e} step {i}: action {action} out of range")));
                }
                if done != (i + 1 == n) {
                    return Err(Error::Format(format!("episode {e}: done flag misplaced at step {i}")));
                }
                steps.push(Transition { obs, action, reward, done });
            }
            episodes.push(Episode { steps });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after dataset", bytes.len() - r.pos)));
        }
        Ok(OfflineDataset { game_id, obs_shape, action_count, seed, policy_label, episodes })
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<OfflineDataset> {
        OfflineDataset::decode(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("dataset truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Rolls whole episodes until the next one would overflow `budget`.
pub fn gen_offline(spec: &GameSpec, budget: usize, mix: &PolicyMix, seed: u64) -> Result<OfflineDataset> {
    if budget == 0 {
        return Err(config_err!("transition budget must be at least 1"));
    }
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    let mut total = 0;
    loop {
        let policy = mix.draw(&mut rng);
        let ro = rollout(spec, policy, &mut rng)?;
        if total + ro.len() > budget {
            break;
        }
        total += ro.len();
        let n = ro.len();
        let steps = ro
            .observations
            .into_iter()
            .zip(ro.actions.iter().zip(&ro.rewards))
            .enumerate()
            .map(|(i, (obs, (&a, &r)))| Transition { obs, action: a as u8, reward: r, done: i + 1 == n })
            .collect();
        episodes.push(Episode { steps });
    }
    Ok(OfflineDataset {
        game_id: spec.game_id.clone(),
        obs_shape: spec.obs_shape().to_vec(),
        action_count: ACTIONS,
        seed,
        policy_label: mix.label(),
        episodes,
    })
}

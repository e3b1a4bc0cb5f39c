use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{Method, RunConfig};
use super::model::{build_conditioning, GameConditioning, Model};
use super::{mix_seed, BenchData};
use crate::error::{config_err, Error, Result};
use crate::numerics::{clip_grad_norm, lr_schedule, AdamW, Checkpoint, ParamStore, Scalar, Tape, Tensor};
use crate::policy::{AdapterSegment, Batch, Trajectory};

pub const RESUME_FILE: &str = "resume.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "loss.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub tokens: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One row per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,tokens,lr,loss,grad_norm\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6e},{:.6},{:.6}", r.step, r.epoch, r.tokens, r.lr, r.loss, r.grad_norm);
        }
        out
    }

    /// Mean loss of every epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.rows {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    fn to_tensor(&self) -> Option<Tensor<f64>> {
        if self.rows.is_empty() {
            return None;
        }
        let data = self
            .rows
            .iter()
            .flat_map(|r| [r.step as f64, r.epoch as f64, r.tokens as f64, r.lr, r.loss, r.grad_norm])
            .collect();
        Tensor::new(vec![self.rows.len(), 6], data).ok()
    }

    fn from_tensor(t: &Tensor<f64>) -> TrainLog {
        let rows = t
            .data()
            .chunks_exact(6)
            .map(|c| LogRow { step: c[0] as usize, epoch: c[1] as usize, tokens: c[2] as u64, lr: c[3], loss: c[4], grad_norm: c[5] })
            .collect();
        TrainLog { rows }
    }
}

/// Per-epoch progress handed to [`TrainOptions::on_epoch`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where `resume.ckpt`, `model.ckpt` and `loss.csv` go.
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many epochs in total, leaving the resume checkpoint behind.
    pub stop_after: Option<usize>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochSummary)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub method: Method,
    pub store: ParamStore<f32>,
    pub log: TrainLog,
    pub completed: bool,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn checkpoint_hash(&self) -> String {
        hex::encode(Sha256::digest(self.checkpoint().encode()))
    }
}

/// Index of every transition of a game, for uniform window starts.
pub(super) struct Windows<'a> {
    trajs: &'a [Trajectory],
    cum: Vec<usize>,
}

impl<'a> Windows<'a> {
    pub(super) fn new(trajs: &'a [Trajectory]) -> Windows<'a> {
        let mut cum = Vec::with_capacity(trajs.len());
        let mut acc = 0;
        for t in trajs {
            acc += t.len();
            cum.push(acc);
        }
        Windows { trajs, cum }
    }

    pub(super) fn total(&self) -> usize {
        self.cum.last().copied().unwrap_or(0)
    }

    /// A window starting at a uniform transition, pulled back so it stays
    /// inside its episode when the episode is long enough.
    pub(super) fn sample<R: Rng>(&self, rng: &mut R, k: usize) -> (&'a Trajectory, std::ops::Range<usize>) {
        let u = rng.gen_range(0..self.total());
        let ep = self.cum.partition_point(|&c| c <= u);
        let t = u - if ep == 0 { 0 } else { self.cum[ep - 1] };
        let traj = &self.trajs[ep];
        let len = traj.len();
        let start = if len >= k { t.min(len - k) } else { 0 };
        (traj, start..(start + k).min(len))
    }
}

/// Windows per game this step: an even share, the remainder rotating.
pub fn round_robin(batch: usize, games: usize, step: usize) -> Vec<usize> {
    let (base, rem) = (batch / games, batch % games);
    let offset = (step * rem) % games;
    (0..games).map(|g| base + usize::from((g + games - offset) % games < rem)).collect()
}

fn meta_entry(ck: &Checkpoint, name: &str) -> Result<f64> {
    ck.get(name).map(|t| t.to::<f64>().data()[0]).ok_or_else(|| Error::Lookup(name.to_string()))
}

struct State {
    store: ParamStore<f32>,
    opt: AdamW<f32>,
    log: TrainLog,
    epoch: usize,
    step: usize,
    tokens: u64,
}

impl State {
    fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::from_store(&self.store);
        for (k, v) in self.opt.state() {
            ck.push(k, v);
        }
        ck.push("meta.epoch", Tensor::row_vector(vec![self.epoch as f64]));
        ck.push("meta.step", Tensor::row_vector(vec![self.step as f64]));
        ck.push("meta.tokens", Tensor::row_vector(vec![self.tokens as f64]));
        if let Some(t) = self.log.to_tensor() {
            ck.push("log.rows", t);
        }
        ck.write(path)
    }

    fn load(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::read(path)?;
        ck.load_into(&mut self.store)?;
        let opt: Vec<(String, Tensor<f32>)> = ck.with_prefix("opt.");
        self.opt.load_state(opt.iter().map(|(k, v)| (k.as_str(), v)));
        self.epoch = meta_entry(&ck, "meta.epoch")? as usize;
        self.step = meta_entry(&ck, "meta.step")? as usize;
        self.tokens = meta_entry(&ck, "meta.tokens")? as u64;
        self.log = ck.get("log.rows").map(|t| TrainLog::from_tensor(&t.to())).unwrap_or_default();
        Ok(())
    }
}

/// Trains one method on the split's training games.
pub fn train(data: &BenchData, cfg: &RunConfig, method: Method, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(config_err!("no training games"));
    }
    let t = &cfg.train;
    let k = cfg.model.context_len;
    let model = Model::new(cfg, method, data.obs_len)?;
    let conds: Vec<Option<GameConditioning>> = data
        .train
        .iter()
        .map(|g| build_conditioning(method, &g.spec.game_id, g.embedding.as_ref()))
        .collect::<Result<_>>()?;
    let windows: Vec<Windows> = data.train.iter().map(|g| Windows::new(&g.trajectories)).collect();
    if let Some((i, _)) = windows.iter().enumerate().find(|(_, w)| w.total() == 0) {
        return Err(config_err!("training game `{}` has no transitions", data.train[i].spec.game_id));
    }
    let total: usize = windows.iter().map(Windows::total).sum();
    let per_epoch = if t.windows_per_epoch > 0 { t.windows_per_epoch } else { (total / k).max(1) };
    let steps_per_epoch = per_epoch.div_ceil(t.batch_size);
    let final_tokens = (t.max_epochs * steps_per_epoch * t.batch_size * k) as f64;

    let mut st = State {
        store: model.init(t.seed)?,
        opt: AdamW::new((t.beta1, t.beta2), t.weight_decay),
        log: TrainLog::default(),
        epoch: 0,
        step: 0,
        tokens: 0,
    };
    let resume_path = opts.run_dir.as_ref().map(|d| d.join(RESUME_FILE));
    if opts.resume {
        let p = resume_path.as_ref().ok_or_else(|| config_err!("resume needs a run directory"))?;
        if p.exists() {
            st.load(p)?;
        }
    }
    if let Some(d) = &opts.run_dir {
        std::fs::create_dir_all(d)?;
    }

    let games = data.train.len();
    while st.epoch < t.max_epochs {
        if opts.stop_after.is_some_and(|n| st.epoch >= n) {
            return Ok(TrainOutcome { method, store: st.store, log: st.log, completed: false });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(t.seed, st.epoch as u64));
        let first = st.log.rows.len();
        for _ in 0..steps_per_epoch {
            let counts = round_robin(t.batch_size, games, st.step);
            let mut batch = Batch::new(k, data.obs_len);
            let mut ranges = Vec::with_capacity(games);
            for (g, &n) in counts.iter().enumerate() {
                let start = batch.windows;
                for _ in 0..n {
                    let (traj, r) = windows[g].sample(&mut rng, k);
                    batch.push(traj, r)?;
                }
                ranges.push(start..batch.windows);
            }
            let mut tape = Tape::with_dropout(cfg.model.dropout, mix_seed(t.seed ^ 0xd20f, st.step as u64));
            let segs = if method.is_conditioned() {
                let mut segs = Vec::new();
                for (g, r) in ranges.into_iter().enumerate() {
                    if r.is_empty() {
                        continue;
                    }
                    let c = conds[g].as_ref().expect("conditioned method has conditioning for every game");
                    segs.push(AdapterSegment { windows: r, layers: model.adapters_on_tape(&mut tape, &st.store, c)? });
                }
                Some(segs)
            } else {
                None
            };
            let logits = model.dt.forward(&mut tape, &st.store, &batch, segs.as_deref())?;
            let loss = model.dt.loss(&mut tape, logits, &batch);
            let lv = tape.scalar(loss).as_f64();
            if !lv.is_finite() {
                return Err(Error::NumericDomain(format!(
                    "{method} loss became {lv} at step {} (epoch {})",
                    st.step, st.epoch
                )));
            }
            let grads = tape.backward(loss);
            let mut pg = tape.param_grads(&grads);
            let norm = clip_grad_norm(&mut pg, t.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NumericDomain(format!("{method} gradient norm is {norm} at step {}", st.step)));
            }
            st.tokens += batch.mask.iter().filter(|&&m| m).count() as u64;
            let lr = lr_schedule(t.lr, st.tokens as f64, t.warmup_tokens as f64, final_tokens);
            st.opt.step(&mut st.store, &pg, lr);
            st.log.rows.push(LogRow { step: st.step, epoch: st.epoch, tokens: st.tokens, lr, loss: lv, grad_norm: norm });
            st.step += 1;
        }
        let rows = &st.log.rows[first..];
        let summary = EpochSummary {
            epoch: st.epoch,
            steps: rows.len(),
            mean_loss: rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64,
        };
        st.epoch += 1;
        if let Some(p) = &resume_path {
            st.save(p)?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&summary);
        }
    }
    let out = TrainOutcome { method, store: st.store, log: st.log, completed: true };
    if let Some(d) = &opts.run_dir {
        out.checkpoint().write(&d.join(MODEL_FILE))?;
        std::fs::write(d.join(LOG_FILE), out.log.to_csv())?;
    }
    Ok(out)
}

/// Loads a trained model written by [`train`].
pub fn load_model(run_dir: &Path, cfg: &RunConfig, method: Method, obs_len: usize) -> Result<(Model, ParamStore<f32>)> {
    let path = run_dir.join(MODEL_FILE);
    if !path.exists() {
        return Err(config_err!("no checkpoint for method {method} at {}", path.display()));
    }
    let model = Model::new(cfg, method, obs_len)?;
    let mut store = model.init(cfg.train.seed)?;
    Checkpoint::read(&path)?.load_into(&mut store)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_is_even_over_time() {
        let mut tot = [0usize; 6];
        for step in 0..6 {
            let c = round_robin(32, 6, step);
            assert_eq!(c.iter().sum::<usize>(), 32);
            assert!(c.iter().all(|&n| n == 5 || n == 6));
            for (t, n) in tot.iter_mut().zip(c) {
                *t += n;
            }
        }
        assert_eq!(tot, [32; 6]);
        assert_eq!(round_robin(3, 6, 0), vec![1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn windows_stay_inside_episodes() {
        let traj = |n: usize| Trajectory {
            game_id: "g".into(),
            states: vec![vec![0.0]; n],
            actions: vec![0; n],
            rtgs: vec![0.0; n],
            timesteps: (0..n).collect(),
        };
        let trajs = vec![traj(5), traj(30), traj(12)];
        let w = Windows::new(&trajs);
        assert_eq!(w.total(), 47);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (t, r) = w.sample(&mut rng, 10);
            assert!(r.end <= t.len());
            assert_eq!(r.len(), t.len().min(10));
        }
    }
}

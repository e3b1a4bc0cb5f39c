//! Fixtures shared by the criterion benches: one training batch per method,
//! laid out the way the trainer builds it.

use std::ops::Range;

use dtgi_core::bench::{build_conditioning, round_robin, BenchData, GameConditioning, Method, Model, RunConfig};
use dtgi_core::policy::{AdapterSegment, Batch};
use dtgi_core::{ParamStore, Result, Tape};

pub struct Fixture {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub batch: Batch,
    pub segments: Vec<(Range<usize>, Option<GameConditioning>)>,
}

impl Fixture {
    /// `cfg.train.batch_size` windows, dealt round-robin over the training
    /// games, each starting at step 0 of an episode.
    pub fn new(data: &BenchData, cfg: &RunConfig, method: Method) -> Result<Fixture> {
        let model = Model::new(cfg, method, data.obs_len)?;
        let store = model.init::<f32>(cfg.train.seed)?;
        let k = cfg.model.context_len;
        let counts = round_robin(cfg.train.batch_size, data.train.len(), 0);
        let mut batch = Batch::new(k, data.obs_len);
        let mut segments = Vec::new();
        for (g, task) in data.train.iter().enumerate() {
            let start = batch.windows;
            for traj in task.trajectories.iter().cycle().take(counts[g]) {
                batch.push(traj, 0..traj.len().min(k))?;
            }
            let cond = build_conditioning(method, &task.spec.game_id, task.embedding.as_ref())?;
            segments.push((start..batch.windows, cond));
        }
        Ok(Fixture { model, store, batch, segments })
    }

    /// Loss and a full backward pass; returns the loss.
    pub fn step(&self) -> Result<f32> {
        let mut tape = Tape::new();
        let mut segs = Vec::new();
        for (r, cond) in &self.segments {
            if let (Some(c), false) = (cond, r.is_empty()) {
                segs.push(AdapterSegment { windows: r.clone(), layers: self.model.adapters_on_tape(&mut tape, &self.store, c)? });
            }
        }
        let segs = self.model.method.is_conditioned().then_some(segs);
        let logits = self.model.dt.forward(&mut tape, &self.store, &self.batch, segs.as_deref())?;
        let loss = self.model.dt.loss(&mut tape, logits, &self.batch);
        let grads = tape.backward(loss);
        std::hint::black_box(tape.param_grads(&grads));
        Ok(tape.scalar(loss))
    }
}

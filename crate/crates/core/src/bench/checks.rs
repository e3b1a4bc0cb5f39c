//! Finite-difference suite over the conditioning stack and the DT, and the
//! fixed-batch overfit check.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Method, RunConfig};
use super::model::{build_conditioning, GameConditioning, Model};
use super::train::{round_robin, Windows};
use super::BenchData;
use crate::conditioning::{importance_tape, Stream};
use crate::error::{Error, Result};
use crate::hyperadapter::{adapter_forward_tape, AdapterVars, Role};
use crate::mgi::SetEmbedding;
use crate::numerics::{clip_grad_norm, grad_check, AdamW, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::policy::{AdapterSegment, Batch, Trajectory};

/// Central-difference step of the suite.
pub const GRAD_H: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_TOL: f64 = 1e-4;
const SAMPLES: usize = 64;
const SUITE_OBS: usize = 10;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= GRAD_TOL
    }
}

fn rand_tensor<R: Rng>(rng: &mut R, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn probe<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_embedding<R: Rng>(rng: &mut R, n: usize, m: usize, e: usize) -> SetEmbedding {
    let mut t = |rows: usize| rand_tensor(rng, rows, e).cast::<f32>();
    SetEmbedding { n, m, desc: t(n), frames: t(n * m), guidance: t(n * m) }
}

fn rand_traj<R: Rng>(rng: &mut R, len: usize) -> Trajectory {
    Trajectory {
        game_id: "suite".into(),
        states: (0..len).map(|_| (0..SUITE_OBS).map(|_| rng.gen_range(0..2) as f32).collect()).collect(),
        actions: (0..len).map(|_| rng.gen_range(0..crate::arcade::ACTIONS)).collect(),
        rtgs: (0..len).map(|i| (len - i) as f32).collect(),
        timesteps: (0..len).collect(),
    }
}

/// The training init is tiny (and zero for up-projections); spread weights
/// so every path carries gradients well above rounding noise.
fn spread<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    let names: Vec<String> = store.names().filter(|n| !n.ends_with(".g")).map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed name").data_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
}

fn run<F>(cases: &mut Vec<GradCase>, name: &'static str, store: &ParamStore<f64>, salt: u64, f: F) -> Result<()>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let report = grad_check(f, store, GRAD_H, SAMPLES, salt)?;
    cases.push(GradCase { name, report });
    Ok(())
}

/// Checks every differentiable stage in 64-bit arithmetic with dropout off:
/// both temporal encoders, the fusion MLP, the importance softmax, both
/// hypernetworks, candidate fusion, the adapter and a two-layer DT with
/// adapters end to end.
pub fn grad_suite(seed: u64) -> Result<Vec<GradCase>> {
    let cfg = RunConfig::test_scale();
    let model = Model::new(&cfg, Method::Dtgi, SUITE_OBS)?;
    let mut store = model.init::<f64>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c4e);
    spread(&mut store, &mut rng);
    let (cond, hyper) = model.cond.as_ref().expect("DTGI carries a conditioning stack");
    let (n, m, e) = (cfg.split.n_instructions, cfg.split.segment_len, cfg.embedding.dim);
    let (d, b) = (cfg.model.embed_dim, cfg.model.adapter_bottleneck);
    let mut cases = Vec::new();

    for (name, which) in [("frame temporal encoder", Stream::Frame), ("guidance temporal encoder", Stream::Guidance)] {
        let x = rand_tensor(&mut rng, n * m, e);
        let r = probe(&mut rng, n * e);
        run(&mut cases, name, &store, 1, |t, s| {
            let xv = t.constant(x.clone());
            let y = cond.encode_temporal(t, s, xv, m, which)?;
            Ok(t.dot_const(y, &r))
        })?;
    }

    let (dd, ff, gg) = (rand_tensor(&mut rng, n, e), rand_tensor(&mut rng, n, e), rand_tensor(&mut rng, n, e));
    let r = probe(&mut rng, n * e);
    run(&mut cases, "fusion MLP", &store, 2, |t, s| {
        let (dv, fv, gv) = (t.constant(dd.clone()), t.constant(ff.clone()), t.constant(gg.clone()));
        let y = cond.fuse(t, s, dv, fv, gv)?;
        Ok(t.dot_const(y, &r))
    })?;

    let mut extra = store.clone();
    extra.insert("suite.c", rand_tensor(&mut rng, n, e))?;
    extra.insert("suite.raw", rand_tensor(&mut rng, 1, n))?;
    extra.insert("suite.cands", rand_tensor(&mut rng, n, d * b))?;
    extra.insert("suite.d", rand_tensor(&mut rng, d, b))?;
    extra.insert("suite.u", rand_tensor(&mut rng, b, d))?;
    let r = probe(&mut rng, n);
    run(&mut cases, "importance softmax", &extra, 3, |t, s| {
        let c = t.param(s, "suite.c");
        let y = importance_tape(t, c);
        Ok(t.dot_const(y, &r))
    })?;
    for (name, role) in [("down-projection hypernetwork", Role::Down), ("up-projection hypernetwork", Role::Up)] {
        let r = probe(&mut rng, n * d * b);
        run(&mut cases, name, &extra, 4, |t, s| {
            let c = t.param(s, "suite.c");
            let y = hyper.generate_candidates(t, s, c, role, None)?;
            Ok(t.dot_const(y, &r))
        })?;
    }
    let r = probe(&mut rng, d * b);
    run(&mut cases, "candidate fusion", &extra, 5, |t, s| {
        let cands = t.param(s, "suite.cands");
        let raw = t.param(s, "suite.raw");
        let scores = t.softmax_rows(raw);
        let y = hyper.fuse_candidates(t, cands, scores, Role::Down)?;
        Ok(t.dot_const(y, &r))
    })?;
    let z = rand_tensor(&mut rng, 5, d);
    let r = probe(&mut rng, 5 * d);
    run(&mut cases, "adapter forward", &extra, 6, |t, s| {
        let p = AdapterVars { d_hat: t.param(s, "suite.d"), u_hat: t.param(s, "suite.u") };
        let zv = t.constant(z.clone());
        let y = adapter_forward_tape(t, zv, p);
        Ok(t.dot_const(y, &r))
    })?;

    let batch = suite_batch(&mut rng, cfg.model.context_len)?;
    run(&mut cases, "two-layer DT end to end", &extra, 7, |t, s| {
        let p = AdapterVars { d_hat: t.param(s, "suite.d"), u_hat: t.param(s, "suite.u") };
        let segs = [AdapterSegment { windows: 0..2, layers: vec![p; cfg.model.layers] }];
        let y = model.dt.forward(t, s, &batch, Some(&segs))?;
        Ok(model.dt.loss(t, y, &batch))
    })?;
    Ok(cases)
}

fn suite_batch<R: Rng>(rng: &mut R, k: usize) -> Result<Batch> {
    let mut batch = Batch::new(k, SUITE_OBS);
    batch.push(&rand_traj(rng, k), 0..k)?;
    batch.push(&rand_traj(rng, 3), 0..3)?;
    Ok(batch)
}

/// Embedding to DT loss through every stage at once. Encoder gradients reach
/// the loss through five stages and some coordinates sit near the rounding
/// floor of central differences, so this wiring check is read against a looser
/// bound than the per-stage suite.
pub fn full_chain_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = RunConfig::test_scale();
    let model = Model::new(&cfg, Method::Dtgi, SUITE_OBS)?;
    let mut store = model.init::<f64>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c4e);
    spread(&mut store, &mut rng);
    let (n, m, e) = (cfg.split.n_instructions, cfg.split.segment_len, cfg.embedding.dim);
    let batch = suite_batch(&mut rng, cfg.model.context_len)?;
    let g = GameConditioning {
        emb: rand_embedding(&mut rng, n, m, e),
        modalities: Method::Dtgi.modalities().expect("DTGI is conditioned"),
        learned: true,
    };
    grad_check(
        |t, s| {
            let layers = model.adapters_on_tape(t, s, &g)?;
            let segs = [AdapterSegment { windows: 0..2, layers }];
            let y = model.dt.forward(t, s, &batch, Some(&segs))?;
            Ok(model.dt.loss(t, y, &batch))
        },
        &store,
        GRAD_H,
        SAMPLES,
        seed,
    )
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub windows: usize,
    /// Cross-entropy before each update.
    pub losses: Vec<f64>,
    /// First step whose loss is below a tenth of the initial loss.
    pub hit_step: Option<usize>,
}

impl OverfitReport {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn best(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Trains `method` on one fixed batch of `windows` context windows until the
/// loss drops below a tenth of its start or `max_steps` run out. Dropout is
/// off and the learning rate constant.
pub fn overfit_check(
    data: &BenchData,
    cfg: &RunConfig,
    method: Method,
    windows: usize,
    max_steps: usize,
) -> Result<OverfitReport> {
    let t = &cfg.train;
    let k = cfg.model.context_len;
    let model = Model::new(cfg, method, data.obs_len)?;
    let mut store = model.init::<f32>(t.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x0f17);
    let counts = round_robin(windows, data.train.len(), 0);
    let mut batch = Batch::new(k, data.obs_len);
    let mut segs_spec = Vec::new();
    for (g, task) in data.train.iter().enumerate() {
        let w = Windows::new(&task.trajectories);
        let start = batch.windows;
        for _ in 0..counts[g] {
            let (traj, r) = w.sample(&mut rng, k);
            batch.push(traj, r)?;
        }
        let cond = build_conditioning(method, &task.spec.game_id, task.embedding.as_ref())?;
        segs_spec.push((start..batch.windows, cond));
    }
    let mut opt = AdamW::new((t.beta1, t.beta2), t.weight_decay);
    let mut losses = Vec::new();
    let mut hit_step = None;
    for step in 0..max_steps {
        let mut tape = Tape::new();
        let mut segs = Vec::new();
        for (r, cond) in &segs_spec {
            if let (Some(c), false) = (cond, r.is_empty()) {
                segs.push(AdapterSegment { windows: r.clone(), layers: model.adapters_on_tape(&mut tape, &store, c)? });
            }
        }
        let segs = method.is_conditioned().then_some(segs);
        let logits = model.dt.forward(&mut tape, &store, &batch, segs.as_deref())?;
        let loss = model.dt.loss(&mut tape, logits, &batch);
        let lv = tape.scalar(loss) as f64;
        if !lv.is_finite() {
            return Err(Error::NumericDomain(format!("overfit loss became {lv} at step {step}")));
        }
        losses.push(lv);
        if lv < 0.1 * losses[0] {
            hit_step = Some(step);
            break;
        }
        let grads = tape.backward(loss);
        let mut pg = tape.param_grads(&grads);
        clip_grad_norm(&mut pg, t.grad_clip);
        opt.step(&mut store, &pg, t.lr);
    }
    Ok(OverfitReport { windows: batch.windows, losses, hit_step })
}

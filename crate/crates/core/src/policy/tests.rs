use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::hyperadapter::AdapterParams;
use crate::numerics::{grad_check, AdamW};

fn tiny() -> DTConfig {
    DTConfig {
        context_len: 4,
        layers: 2,
        heads: 2,
        embed_dim: 16,
        ffn_hidden: 32,
        action_space: 6,
        obs_len: 10,
        max_timestep: 16,
        dropout: 0.1,
        rtg_scale: 5.0,
    }
}

fn model<T: Scalar>(cfg: DTConfig, seed: u64, spread: Option<f64>) -> (DecisionTransformer, ParamStore<T>) {
    let dt = DecisionTransformer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    dt.init(&mut store, &mut Init { rng: &mut rng }).unwrap();
    if let Some(s) = spread {
        let names: Vec<String> = store.names().filter(|n| !n.ends_with(".g")).map(str::to_string).collect();
        for n in names {
            for v in store.get_mut(&n).unwrap().data_mut() {
                *v = T::from_f64(rng.gen_range(-s..s));
            }
        }
    }
    (dt, store)
}

fn traj(len: usize, obs: usize, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Trajectory {
        game_id: "g".into(),
        states: (0..len).map(|_| (0..obs).map(|_| rng.gen_range(0..2) as f32).collect()).collect(),
        actions: (0..len).map(|_| rng.gen_range(0..6)).collect(),
        rtgs: (0..len).map(|i| (len - i) as f32).collect(),
        timesteps: (0..len).collect(),
    }
}

fn batch(windows: &[(u64, usize)], k: usize) -> Batch {
    let mut b = Batch::new(k, 10);
    for &(seed, n) in windows {
        b.push(&traj(n, 10, seed), 0..n).unwrap();
    }
    b
}

#[test]
fn rtg_examples() {
    assert_eq!(compute_rtg(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![6.0, 5.0, 3.0]);
    assert_eq!(compute_rtg(&[1.0, 2.0, 3.0], 0.5).unwrap(), vec![2.75, 3.5, 3.0]);
    assert_eq!(compute_rtg(&[0.0; 4], 0.9).unwrap(), vec![0.0; 4]);
    assert!(matches!(compute_rtg(&[1.0], 1.5), Err(crate::Error::Config(_))));
}

#[test]
fn zero_adapter_is_bitwise_plain() {
    let (dt, store) = model::<f32>(tiny(), 1, None);
    let b = batch(&[(1, 4), (2, 3)], 4);
    let mut tape = Tape::new();
    let plain = dt.forward(&mut tape, &store, &b, None).unwrap();
    let plain = tape.value(plain).clone();
    let mut tape = Tape::new();
    let zero = AdapterParams::<f32>::zeros(16, 4);
    let v = zero.on_tape(&mut tape);
    let segs = [AdapterSegment { windows: 0..1, layers: vec![v; 2] }, AdapterSegment { windows: 1..2, layers: vec![v; 2] }];
    let adapted = dt.forward(&mut tape, &store, &b, Some(&segs)).unwrap();
    let adapted = tape.value(adapted);
    assert!(plain.data().iter().zip(adapted.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn causal_contract() {
    let (dt, store) = model::<f64>(tiny(), 2, Some(0.5));
    let base = traj(4, 10, 3);
    let mut changed = base.clone();
    changed.states[3] = vec![1.0; 10];
    changed.rtgs[3] = -7.0;
    changed.actions[2] = (base.actions[2] + 1) % 6;
    changed.actions[3] = (base.actions[3] + 1) % 6;
    let logits = |t: &Trajectory| {
        let mut b = Batch::new(4, 10);
        b.push(t, 0..4).unwrap();
        let mut tape = Tape::new();
        let y = dt.forward(&mut tape, &store, &b, None).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (logits(&base), logits(&changed));
    for t in 0..3 {
        assert_eq!(a.row(t), b.row(t), "step {t}");
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn padding_contributes_nothing() {
    let (dt, store) = model::<f64>(tiny(), 4, Some(0.5));
    let loss = |b: &Batch| {
        let mut tape = Tape::new();
        let y = dt.forward(&mut tape, &store, b, None).unwrap();
        let l = dt.loss(&mut tape, y, b);
        tape.scalar(l)
    };
    let short = batch(&[(5, 2)], 2);
    let mut padded = batch(&[(5, 2)], 4);
    let a = loss(&padded);
    assert!((a - loss(&short)).abs() < 1e-12);
    for v in &mut padded.states[2 * 10..] {
        *v = 3.0;
    }
    padded.actions[3] = 5;
    padded.rtgs[2] = 9.0;
    assert_eq!(a.to_bits(), loss(&padded).to_bits());
}

#[test]
fn end_to_end_grad_check() {
    let (dt, mut store) = model::<f64>(tiny(), 6, Some(0.4));
    let b = batch(&[(7, 4), (8, 2)], 4);
    let rep = grad_check(|t, s| {
        let y = dt.forward(t, s, &b, None)?;
        Ok(dt.loss(t, y, &b))
    }, &store, 1e-5, 64, 1)
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (name, shape) in [("ad.d", [16, 4]), ("ad.u", [4, 16])] {
        let data = (0..64).map(|_| rng.gen_range(-0.5..0.5)).collect();
        store.insert(name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
    }
    let rep = grad_check(|t, s| {
        let v = AdapterVars { d_hat: t.param(s, "ad.d"), u_hat: t.param(s, "ad.u") };
        let segs = [AdapterSegment { windows: 0..2, layers: vec![v; 2] }];
        let y = dt.forward(t, s, &b, Some(&segs))?;
        Ok(dt.loss(t, y, &b))
    }, &store, 1e-5, 64, 2)
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn act_boundaries_and_errors() {
    let (dt, store) = model::<f32>(tiny(), 10, None);
    let t = traj(1, 10, 1);
    let a = dt.act(&store, &t, None, ActMode::Greedy).unwrap();
    assert_eq!(a, dt.act(&store, &t, None, ActMode::Greedy).unwrap());
    let long = traj(9, 10, 2);
    let a = dt.act(&store, &long, None, ActMode::Greedy).unwrap();
    assert!(a < 6);
    let s = ActMode::Sample { temperature: 1.0, seed: 4 };
    assert_eq!(dt.act(&store, &long, None, s).unwrap(), dt.act(&store, &long, None, s).unwrap());
    let mut b = Batch::new(5, 10);
    b.push(&traj(5, 10, 3), 0..5).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(dt.forward(&mut tape, &store, &b, None), Err(crate::Error::Contract(_))));
    assert!(DecisionTransformer::new(DTConfig { heads: 3, ..tiny() }).is_err());
}

#[test]
fn overfit_model_plays_the_scripted_action() {
    let (dt, mut store) = model::<f32>(tiny(), 11, None);
    // the expert always presses action 2, whatever the state
    let mut b = Batch::new(4, 10);
    for seed in 0..8 {
        let mut t = traj(4, 10, seed);
        t.actions = vec![2; 4];
        b.push(&t, 0..4).unwrap();
    }
    let mut opt = AdamW::new((0.9, 0.95), 0.0);
    for _ in 0..60 {
        let mut tape = Tape::new();
        let y = dt.forward(&mut tape, &store, &b, None).unwrap();
        let l = dt.loss(&mut tape, y, &b);
        let grads = tape.backward(l);
        opt.step(&mut store, &tape.param_grads(&grads), 3e-3);
    }
    let start = Trajectory { game_id: "g".into(), states: vec![vec![0.0; 10]], actions: vec![], rtgs: vec![4.0], timesteps: vec![0] };
    assert_eq!(dt.act(&store, &start, None, ActMode::Greedy).unwrap(), 2);
}

#[test]
fn param_count_matches_store() {
    let (dt, store) = model::<f32>(tiny(), 0, None);
    assert_eq!(dt.param_count(), store.num_values());
}

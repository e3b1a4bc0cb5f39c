use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check;

fn small(per_layer: bool) -> HyperConfig {
    HyperConfig { input_dim: 6, hidden: 5, bottleneck: 3, model_dim: 4, per_layer, layers: 2, layer_embed_dim: 2 }
}

fn rand_tensor(r: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn store_for(ha: &HyperAdapter, seed: u64, randomize: bool) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    ha.init(&mut store, &mut Init { rng: &mut rng }).unwrap();
    if randomize {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names {
            for v in store.get_mut(&n).unwrap().data_mut() {
                *v = rng.gen_range(-0.7..0.7);
            }
        }
    }
    store
}

#[test]
fn paper_shapes_and_budget() {
    let ha = HyperAdapter::new(HyperConfig::default()).unwrap();
    let store = store_for(&ha, 0, false);
    ha.check_budget(&store).unwrap();
    let c = HyperConfig::default();
    assert_eq!(c.param_budget(), 512 * 64 * 2 + 64 * 32 * 128 * 2 + 64 * 2 + 32 * 128 * 2);
    let cands = generate_candidates(&ha, &store.cast::<f64>(), &rand_tensor(2, 512, 1), None).unwrap();
    assert_eq!(cands[0].d_hat.shape(), &[128, 32]);
    assert_eq!(cands[0].u_hat.shape(), &[32, 128]);
    // training starts from a zero adapter
    assert!(cands.iter().all(|p| p.u_hat.data().iter().all(|&v| v == 0.0)));
    let mut bad = store.clone();
    bad.insert("hyper.extra", Tensor::zeros(&[1, 1])).unwrap();
    assert!(ha.check_budget(&bad).is_err());
}

#[test]
fn zero_weights_and_identical_features() {
    let ha = HyperAdapter::new(small(false)).unwrap();
    let mut store = store_for(&ha, 1, true);
    let f = rand_tensor(1, 6, 2);
    let twice = Tensor::new(vec![2, 6], [f.data(), f.data()].concat()).unwrap();
    let c = generate_candidates(&ha, &store, &twice, None).unwrap();
    assert_eq!(c[0], c[1]);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let c = generate_candidates(&ha, &store, &twice, None).unwrap();
    assert!(c.iter().all(|p| p.d_hat.data().iter().chain(p.u_hat.data()).all(|&v| v == 0.0)));
    assert!(generate_candidates(&ha, &store, &rand_tensor(2, 5, 0), None).is_err());
}

#[test]
fn fusion_examples() {
    let ha = HyperAdapter::new(small(false)).unwrap();
    let store = store_for(&ha, 3, true);
    let cands = generate_candidates(&ha, &store, &rand_tensor(3, 6, 4), None).unwrap();
    for j in 0..3 {
        let mut s = vec![0.0; 3];
        s[j] = 1.0;
        assert_eq!(fuse_candidates(&cands, &s).unwrap(), cands[j]);
    }
    let two = &cands[..2];
    let f = fuse_candidates(two, &[0.25, 0.75]).unwrap();
    for i in 0..f.d_hat.len() {
        let want = 0.25 * two[0].d_hat.data()[i] + 0.75 * two[1].d_hat.data()[i];
        assert!((f.d_hat.data()[i] - want).abs() < 1e-15);
    }
    let same = vec![cands[0].clone(); 4];
    let u = fuse_candidates(&same, &[0.25; 4]).unwrap();
    assert!(u.d_hat.max_abs_diff(&cands[0].d_hat) < 1e-15);
    assert!(matches!(fuse_candidates(&cands, &[0.5, 0.5]), Err(crate::Error::Contract(_))));
}

#[test]
fn fusion_is_permutation_invariant_and_linear() {
    let ha = HyperAdapter::new(small(false)).unwrap();
    let store = store_for(&ha, 5, true);
    let cands = generate_candidates(&ha, &store, &rand_tensor(4, 6, 6), None).unwrap();
    let s1 = [0.1, 0.2, 0.3, 0.4];
    let s2 = [0.7, 0.1, 0.1, 0.1];
    let perm = [2, 0, 3, 1];
    let pc: Vec<_> = perm.iter().map(|&p| cands[p].clone()).collect();
    let ps: Vec<f64> = perm.iter().map(|&p| s1[p]).collect();
    let a = fuse_candidates(&cands, &s1).unwrap();
    let b = fuse_candidates(&pc, &ps).unwrap();
    assert!(a.d_hat.max_abs_diff(&b.d_hat) < 1e-9 && a.u_hat.max_abs_diff(&b.u_hat) < 1e-9);
    let alpha = 0.3;
    let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
    let lhs = fuse_candidates(&cands, &mix).unwrap();
    let f1 = fuse_candidates(&cands, &s1).unwrap();
    let f2 = fuse_candidates(&cands, &s2).unwrap();
    for i in 0..lhs.u_hat.len() {
        let rhs = alpha * f1.u_hat.data()[i] + (1.0 - alpha) * f2.u_hat.data()[i];
        assert!((lhs.u_hat.data()[i] - rhs).abs() < 1e-9);
    }
}

#[test]
fn adapter_forward_cases() {
    let p = AdapterParams::<f64>::zeros(4, 2);
    assert_eq!(adapter_forward(&[1.0, -2.0, 3.0, 0.5], &p).unwrap(), vec![0.0; 4]);
    // D_hat routes coordinate 0 into bottleneck 0, U_hat maps it back
    let mut d = Tensor::zeros(&[4, 2]);
    d.data_mut()[0] = 1.0;
    let mut u = Tensor::zeros(&[2, 4]);
    u.data_mut()[0] = 1.0;
    u.data_mut()[4 + 1] = 1.0;
    let p = AdapterParams { d_hat: d, u_hat: u };
    assert_eq!(adapter_forward(&[1.0, 0.0, 0.0, 0.0], &p).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    assert!(adapter_forward(&[1.0, 0.0], &p).is_err());
}

#[test]
fn generator_chain_passes_grad_check() {
    for per_layer in [false, true] {
        let ha = HyperAdapter::new(small(per_layer)).unwrap();
        let mut store = store_for(&ha, 7, true);
        store.insert("c", rand_tensor(3, 6, 8)).unwrap();
        store.insert("raw", rand_tensor(1, 3, 9)).unwrap();
        let z = rand_tensor(5, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layer = per_layer.then_some(1);
        let rep = grad_check(
            |t, s| {
                let c = t.param(s, "c");
                let raw = t.param(s, "raw");
                let scores = t.softmax_rows(raw);
                let a = ha.adapter(t, s, c, scores, layer)?;
                let zv = t.constant(z.clone());
                let y = adapter_forward_tape(t, zv, a);
                Ok(t.dot_const(y, &r))
            },
            &store,
            1e-5,
            64,
            12,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
        ha.check_budget(&store).unwrap();
    }
}
